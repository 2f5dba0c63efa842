# services/loda_service.py
"""LODA: an ensemble of sparse random projections, each paired with a
fixed-width histogram of the projected training data. The anomaly score of a
row is the mean -log histogram density over the projections.

Reduced scoring only averages the projections whose nonzero columns are all
observed in the query.
"""
import math
import logging
from dataclasses import dataclass
from typing import ClassVar, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from gapscore.data.models import MaskedMatrix, RowScore, ScoreResult, reduced_quorum
from gapscore.data.rng import SeededRng
from gapscore.services.iforest_service import subset_size
from gapscore.utils.errors import ConfigurationError, ContractViolationError, DomainError, UnsupportedInputError
from gapscore.utils.validators import validate_rho

logger = logging.getLogger(__name__)

STRATEGIES = ("baseline", "reduced")


@dataclass
class Projection:
    nonzero_set: Tuple[int, ...]
    weights: np.ndarray

    def project(self, values: np.ndarray) -> np.ndarray:
        return values[:, list(self.nonzero_set)] @ self.weights

    def dense(self, d: int) -> np.ndarray:
        w = np.zeros(d)
        w[list(self.nonzero_set)] = self.weights
        return w


@dataclass
class Histogram:
    origin: float
    width: float
    densities: np.ndarray
    n_train: int

    @property
    def n_bins(self) -> int:
        return len(self.densities)

    @property
    def floor(self) -> float:
        """Density used for empty bins and values outside the training support"""
        return 1.0 / (self.n_train * self.width * (self.n_bins + 1))

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.origin, self.origin + self.width * self.n_bins, self.n_bins + 1)

    def density(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        edges = self.edges
        idx = np.searchsorted(edges, z, side="right") - 1
        # the right edge belongs to the last bin
        idx = np.where(z == edges[-1], self.n_bins - 1, idx)
        inside = (idx >= 0) & (idx < self.n_bins)
        dens = np.full(z.shape, self.floor)
        dens[inside] = self.densities[idx[inside]]
        return np.where(dens > 0, dens, self.floor)

    def neg_log_density(self, z: np.ndarray) -> np.ndarray:
        return -np.log(self.density(z))


@dataclass
class LodaModel:
    ALGORITHM: ClassVar[str] = "loda"

    projections: List[Projection]
    histograms: List[Histogram]
    n_features: int
    fallback_score: float = 0.0

    @property
    def n_projections(self) -> int:
        return len(self.projections)

    @property
    def pairs(self) -> List[Tuple[Projection, Histogram]]:
        return list(zip(self.projections, self.histograms))

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "fallback_score": self.fallback_score,
            "pairs": [
                {
                    "nonzero_set": list(p.nonzero_set),
                    "weights": p.weights.tolist(),
                    "origin": h.origin,
                    "width": h.width,
                    "densities": h.densities.tolist(),
                    "n_train": h.n_train,
                }
                for p, h in self.pairs
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LodaModel":
        projections, histograms = [], []
        for pair in data["pairs"]:
            projections.append(Projection(tuple(int(j) for j in pair["nonzero_set"]),
                                          np.asarray(pair["weights"], dtype=float)))
            histograms.append(Histogram(float(pair["origin"]), float(pair["width"]),
                                        np.asarray(pair["densities"], dtype=float), int(pair["n_train"])))
        return cls(projections, histograms, int(data["n_features"]), float(data.get("fallback_score", 0.0)))


def _bin_counts(sorted_z: np.ndarray, lo: float, hi: float, n_bins: int) -> np.ndarray:
    """Equal-width bin counts over [lo, hi], last bin closed (same as np.histogram)"""
    edges = np.linspace(lo, hi, n_bins + 1)
    positions = np.searchsorted(sorted_z, edges, side="left")
    positions[-1] = sorted_z.size
    return np.diff(positions)


def br_penalty(n_bins: int) -> float:
    return n_bins - 1 + math.log(n_bins) ** 2.5


def br_search_cap(n: int) -> int:
    return max(1, 3 * int(n // math.log(n)))


def _build_histogram(z: np.ndarray) -> Histogram:
    n = z.size
    lo, hi = float(z.min()), float(z.max())
    if lo == hi:
        return Histogram(origin=lo - 0.5, width=1.0, densities=np.ones(1), n_train=n)
    n_bins = LodaService.br_bin_count(z)
    width = (hi - lo) / n_bins
    counts = _bin_counts(np.sort(z), lo, hi, n_bins)
    return Histogram(origin=lo, width=width, densities=counts / (n * width), n_train=n)


def _fit_pair(X: np.ndarray, k: int, rng: SeededRng) -> Tuple[Projection, Histogram]:
    gen = rng.generator
    features = np.sort(gen.choice(X.shape[1], size=k, replace=False))
    projection = Projection(tuple(int(j) for j in features), gen.standard_normal(k))
    return projection, _build_histogram(projection.project(X))


class LodaService:
    """Fits LODA ensembles and scores (possibly incomplete) rows"""

    @staticmethod
    def br_bin_count(z) -> int:
        """
        Birgé-Rozenholc bin count for the equal-width histogram of z

        Maximises sum_b N_b ln(B N_b / n) - (B - 1 + (ln B)^2.5) over
        B in [1, max(1, 3 floor(n / ln n))]; ties go to the smaller B.
        """
        z = np.sort(np.asarray(z, dtype=float).ravel())
        n = z.size
        if n < 2:
            raise DomainError(f"br_bin_count needs at least 2 values, got {n}")
        lo, hi = float(z[0]), float(z[-1])
        if lo == hi:
            return 1

        best_b, best_value = 1, -np.inf
        for b in range(1, br_search_cap(n) + 1):
            counts = _bin_counts(z, lo, hi, b)
            filled = counts[counts > 0]
            value = float(np.sum(filled * np.log(b * filled / n))) - br_penalty(b)
            if value > best_value:
                best_b, best_value = b, value
        return best_b

    @staticmethod
    def fit_loda(data: MaskedMatrix, n_projections: int = 100, rng: SeededRng = None, n_jobs: int = 1) -> LodaModel:
        """
        Fit T sparse projections with Birgé-Rozenholc histograms

        Args:
            data: Fully observed training matrix
            n_projections: T
            rng: Source of randomness; projection t uses rng.fork(t)
            n_jobs: joblib workers

        Returns:
            The fitted model; fallback_score is the mean training score
        """
        if n_projections < 1:
            raise ConfigurationError(f"LODA needs at least 1 projection, got {n_projections}")
        if rng is None:
            raise ConfigurationError("An explicit SeededRng is required")
        if not data.is_complete():
            raise UnsupportedInputError("LODA training data must not contain missing values")
        if data.n_rows < 2:
            raise ConfigurationError(f"Need at least 2 training rows, got {data.n_rows}")

        X = np.asarray(data.values)
        k = subset_size(data.n_cols)
        fitted = Parallel(n_jobs=n_jobs)(delayed(_fit_pair)(X, k, rng.fork(t)) for t in range(n_projections))

        model = LodaModel(
            projections=[p for p, _ in fitted],
            histograms=[h for _, h in fitted],
            n_features=data.n_cols,
        )
        model.fallback_score = float(LodaService.score_matrix(model, data).scores.mean())
        bins = [h.n_bins for h in model.histograms]
        logger.info(f"Fitted LODA: {n_projections} projections with {k} nonzeros each, d={data.n_cols}, "
                    f"bins {min(bins)}-{max(bins)}")
        return model

    @staticmethod
    def score_matrix(model: LodaModel, data: MaskedMatrix, strategy: str = "baseline",
                     min_members: Optional[int] = None) -> ScoreResult:
        """
        Mean negative log density over projections for every row

        Reduced scoring keeps the projections whose nonzero features are all
        observed; rows with fewer than `min_members` of them (default
        reduced_quorum(n_projections)) take the fallback score and are flagged.
        """
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"Unknown LODA strategy '{strategy}'")
        if data.n_cols != model.n_features:
            raise ConfigurationError(f"Model expects {model.n_features} features, got {data.n_cols}")
        if strategy == "baseline" and not data.is_complete():
            raise ContractViolationError("Baseline LODA scoring needs fully observed rows; impute first or use reduced")

        values = data.to_array(fill=0.0)
        mask = data.mask
        neglog = np.column_stack([h.neg_log_density(p.project(values)) for p, h in model.pairs])

        if strategy == "baseline":
            return ScoreResult(neglog.mean(axis=1))

        applicable = np.column_stack([mask[:, list(p.nonzero_set)].all(axis=1) for p in model.projections])
        counts = applicable.sum(axis=1)
        sums = np.where(applicable, neglog, 0.0).sum(axis=1)
        quorum = reduced_quorum(model.n_projections) if min_members is None else max(1, int(min_members))
        not_scored = counts < quorum
        with np.errstate(invalid="ignore", divide="ignore"):
            # complete rows reproduce the baseline arithmetic exactly
            scores = np.where(counts == model.n_projections, neglog.mean(axis=1), sums / np.maximum(counts, 1))
        scores = np.where(not_scored, model.fallback_score, scores)
        if not_scored.any():
            logger.warning(f"{int(not_scored.sum())} of {data.n_rows} row(s) have fewer than {quorum} applicable projection(s); "
                           f"assigned fallback score {model.fallback_score:.6g}")
        return ScoreResult(scores, not_scored)

    @staticmethod
    def score_loda(model: LodaModel, x, mask=None, strategy: str = "baseline",
                   min_members: Optional[int] = None) -> RowScore:
        values = np.atleast_2d(np.asarray(x, dtype=float))
        mask = ~np.isnan(values) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        result = LodaService.score_matrix(model, MaskedMatrix(values, mask), strategy, min_members)
        return RowScore(float(result.scores[0]), bool(result.not_scored[0]))

    @staticmethod
    def enlarged_projection_count(n_projections: int, d: int, rho: float) -> int:
        """Projections needed so that about n_projections stay applicable at missing fraction rho"""
        errors = validate_rho(rho)
        if errors:
            raise ConfigurationError("; ".join(errors))
        k = subset_size(d)
        m = int(round(rho * d))
        applicable = math.comb(d - m, k)
        if applicable == 0:
            raise DomainError(f"With {m} of {d} features missing no projection of {k} features is ever applicable")
        # ceil(T * C(d, k) / C(d - m, k)) in exact integer arithmetic
        return -(-n_projections * math.comb(d, k) // applicable)


loda_service = LodaService()

br_bin_count = loda_service.br_bin_count
fit_loda = loda_service.fit_loda
score_loda = loda_service.score_loda
score_matrix = loda_service.score_matrix
enlarged_projection_count = loda_service.enlarged_projection_count
