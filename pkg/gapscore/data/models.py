# data/models.py
import math
from dataclasses import dataclass, asdict, field, fields
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from gapscore.utils.errors import ConfigurationError, FormatError


class Algorithm(Enum):
    IFOREST = "iforest"
    LODA = "loda"
    EGMM = "egmm"


class Strategy(Enum):
    MEAN = "mean"
    MICE = "mice"
    PROPORTIONAL = "proportional"
    REDUCED = "reduced"
    MARGINAL = "marginal"
    SENTINEL = "sentinel"


# Which missing-value strategies each detector supports; sentinel replaces NA
# with an impossible value and scores with the unmodified detector
VALID_STRATEGIES: Dict[Algorithm, List[Strategy]] = {
    Algorithm.IFOREST: [Strategy.MEAN, Strategy.MICE, Strategy.PROPORTIONAL, Strategy.REDUCED,
                        Strategy.SENTINEL],
    Algorithm.LODA: [Strategy.MEAN, Strategy.MICE, Strategy.REDUCED, Strategy.SENTINEL],
    Algorithm.EGMM: [Strategy.MEAN, Strategy.MICE, Strategy.MARGINAL],
}

# Reduced scoring needs at least this share of the ensemble applicable to a
# row; rows below it fall back
MIN_MEMBER_FRACTION = 0.05


class BaseRecord:
    """Base for flat records that travel through CSV files"""

    @classmethod
    def from_dict(cls, data: dict):
        allowed_fields = {f.name for f in fields(cls)}
        filtered_data = {k: v for k, v in data.items() if k in allowed_fields}
        return cls(**filtered_data)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Enum):
                data[key] = value.value
        return data


@dataclass(frozen=True, eq=False)
class MaskedMatrix:
    """Row-major numeric matrix with a parallel observed-cell mask (True = observed)"""

    values: np.ndarray
    mask: np.ndarray
    columns: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2:
            raise FormatError(f"Matrix must be two-dimensional, got shape {values.shape}")
        if values.shape != mask.shape:
            raise FormatError(f"Values shape {values.shape} does not match mask shape {mask.shape}")
        if values.shape[1] < 1:
            raise FormatError("Matrix needs at least one column")

        columns = tuple(self.columns) if self.columns else tuple(f"x{j}" for j in range(values.shape[1]))
        if len(columns) != values.shape[1]:
            raise FormatError(f"Got {len(columns)} column names for {values.shape[1]} columns")

        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "columns", columns)

    @classmethod
    def from_array(cls, array, columns: Sequence[str] = ()) -> "MaskedMatrix":
        """Build from a float array where NaN marks a missing cell"""
        array = np.atleast_2d(np.asarray(array, dtype=float))
        return cls(values=array, mask=~np.isnan(array), columns=tuple(columns))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def to_array(self, fill: float = np.nan) -> np.ndarray:
        """Copy of the values with every missing cell set to `fill`"""
        return np.where(self.mask, self.values, fill)

    def row(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.values[i], self.mask[i]

    def observed_columns(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.mask[i])

    def take(self, rows) -> "MaskedMatrix":
        rows = np.asarray(rows)
        return MaskedMatrix(self.values[rows], self.mask[rows], self.columns)

    def with_mask(self, mask: np.ndarray) -> "MaskedMatrix":
        """Same payload, cells outside `mask` become missing"""
        mask = np.asarray(mask, dtype=bool) & self.mask
        return MaskedMatrix(np.where(mask, self.values, np.nan), mask, self.columns)

    def filled(self, values: np.ndarray) -> "MaskedMatrix":
        """Fully observed copy taking missing cells from `values`"""
        values = np.asarray(values, dtype=float)
        merged = np.where(self.mask, self.values, values)
        return MaskedMatrix(merged, np.ones_like(self.mask), self.columns)

    def equals(self, other: "MaskedMatrix") -> bool:
        """Equal masks and equal values on observed cells"""
        if self.shape != other.shape or not np.array_equal(self.mask, other.mask):
            return False
        return bool(np.array_equal(self.values[self.mask], other.values[other.mask]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.to_array(), columns=list(self.columns))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: MaskedMatrix
    labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        if self.labels is None:
            return
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (self.features.n_rows,):
            raise FormatError(
                f"Got {labels.shape[0] if labels.ndim else 0} labels for {self.features.n_rows} rows"
            )
        if not np.isin(labels, (0, 1)).all():
            raise FormatError("Labels must be 0 (nominal) or 1 (anomaly)")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_anomalies(self) -> int:
        return int(self.labels.sum()) if self.labels is not None else 0

    def to_frame(self, label_column: str = "label") -> pd.DataFrame:
        frame = self.features.to_frame()
        if self.labels is not None:
            frame[label_column] = self.labels
        return frame


@dataclass
class EvalRecord(BaseRecord):
    """One experiment cell: AUC of an (algorithm, strategy) pair at one rho"""

    dataset: str
    algorithm: Algorithm
    strategy: Strategy
    rho: float
    replicate: int
    seed: int
    auc: float

    def __post_init__(self):
        try:
            self.algorithm = Algorithm(self.algorithm)
            self.strategy = Strategy(self.strategy)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        if self.strategy not in VALID_STRATEGIES[self.algorithm]:
            raise ConfigurationError(
                f"Strategy '{self.strategy.value}' is not available for algorithm '{self.algorithm.value}'"
            )
        self.rho = float(self.rho)
        self.replicate = int(self.replicate)
        self.seed = int(self.seed)
        self.auc = float(self.auc)

    @property
    def key(self) -> tuple:
        return (self.dataset, self.algorithm.value, self.strategy.value, self.rho, self.replicate)


RECORD_COLUMNS = ["dataset", "algorithm", "strategy", "rho", "replicate", "seed", "auc"]


@dataclass
class ScoreResult:
    """Per-row anomaly scores and the rows that fell back to the neutral score"""

    scores: np.ndarray
    not_scored: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.not_scored is None:
            self.not_scored = np.zeros(self.scores.shape, dtype=bool)
        else:
            self.not_scored = np.asarray(self.not_scored, dtype=bool)

    @property
    def n_not_scored(self) -> int:
        return int(self.not_scored.sum())


def reduced_quorum(ensemble_size: int, fraction: float = MIN_MEMBER_FRACTION) -> int:
    """Fewest applicable members a reduced score may average over"""
    return max(1, math.ceil(fraction * ensemble_size - 1e-9))


class RowScore(NamedTuple):
    """Score of a single query row; not_scored marks the neutral fallback"""

    score: float
    not_scored: bool = False
