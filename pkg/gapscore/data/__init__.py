from .models import (
    Algorithm,
    Strategy,
    VALID_STRATEGIES,
    MaskedMatrix,
    LabeledDataset,
    EvalRecord,
    ScoreResult,
    RowScore,
    reduced_quorum,
)
from .rng import SeededRng, rng_fork
from .repository import dataset_repo, model_repo, result_repo, load_csv, write_csv

__all__ = [
    "Algorithm",
    "Strategy",
    "VALID_STRATEGIES",
    "MaskedMatrix",
    "LabeledDataset",
    "EvalRecord",
    "ScoreResult",
    "RowScore",
    "reduced_quorum",
    "SeededRng",
    "rng_fork",
    "dataset_repo",
    "model_repo",
    "result_repo",
    "load_csv",
    "write_csv",
]
