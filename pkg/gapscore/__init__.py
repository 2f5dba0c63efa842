"""gapscore: anomaly detection when query rows have missing values."""
__version__ = "0.1.0"
