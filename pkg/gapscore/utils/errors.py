# utils/errors.py
from typing import Optional


class GapscoreError(Exception):
    """Base class for every error raised by gapscore"""


class ConfigurationError(GapscoreError):
    """Invalid parameter, flag or configuration file"""


class ParseError(GapscoreError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        if location:
            message = f"{message} at {', '.join(location)}"
        super().__init__(message)


class FormatError(GapscoreError):
    """Structurally malformed input file (e.g. ragged CSV rows)"""


class UnsupportedInputError(GapscoreError):
    """Input the algorithm does not handle, such as NA in training data"""


class DomainError(GapscoreError):
    """Argument outside the mathematical domain of an operation"""


class ContractViolationError(GapscoreError):
    """Caller broke an operation's precondition"""


class UndefinedAucError(GapscoreError):
    """AUC requested for labels containing a single class"""


class ModelFormatError(GapscoreError):
    """Serialized model file that cannot be read back"""


class MissingBaselineError(GapscoreError):
    """No rho = 0 record to normalize a relative AUC against"""
