from .iforest_service import iforest_service, IsolationForest
from .loda_service import loda_service, LodaModel
from .egmm_service import egmm_service, EgmmModel, Gmm
from .impute_service import impute_service, ColumnStats, RidgePosterior, ImputationResult
from .synth_service import synth_service, MissingnessPlan
from .experiment_service import experiment_service

__all__ = [
    "iforest_service",
    "IsolationForest",
    "loda_service",
    "LodaModel",
    "egmm_service",
    "EgmmModel",
    "Gmm",
    "impute_service",
    "ColumnStats",
    "RidgePosterior",
    "ImputationResult",
    "synth_service",
    "MissingnessPlan",
    "experiment_service",
]
