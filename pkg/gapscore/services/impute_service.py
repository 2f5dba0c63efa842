# services/impute_service.py
"""Query-time imputation: unconditional column means, and chained equations
(MICE) with Bayesian ridge regressions sampled by Gibbs passes."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from gapscore.config import SENTINEL_VALUE, MiceConfig
from gapscore.data.models import MaskedMatrix
from gapscore.data.rng import SeededRng
from gapscore.utils.errors import ConfigurationError, DomainError, UnsupportedInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ColumnStats:
    means: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.means)


@dataclass(frozen=True)
class RidgePosterior:
    """Posterior of a ridge regression; the intercept is the last coefficient"""

    coef_mean: np.ndarray
    coef_cov: np.ndarray
    noise_var: float

    def predict(self, X: np.ndarray, coef: Optional[np.ndarray] = None) -> np.ndarray:
        coef = self.coef_mean if coef is None else coef
        return _with_intercept(X) @ coef


@dataclass
class ImputationResult:
    matrix: MaskedMatrix
    samples_averaged: int = 0
    fallback_columns: List[int] = field(default_factory=list)


def _with_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack((X, np.ones(X.shape[0])))


class ImputeService:
    @staticmethod
    def column_stats(train: MaskedMatrix) -> ColumnStats:
        """Per-column means over the observed training cells"""
        sums = np.where(train.mask, train.values, 0.0).sum(axis=0)
        counts = train.mask.sum(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise DomainError(f"Training column(s) {[train.columns[j] for j in empty]} have no observed value")
        return ColumnStats(means=sums / counts)

    @staticmethod
    def mean_impute(stats: ColumnStats, x, mask=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mask = ~np.isnan(x) if mask is None else np.asarray(mask, dtype=bool)
        if x.shape[-1] != stats.n_features:
            raise ConfigurationError(f"Column stats cover {stats.n_features} features, row has {x.shape[-1]}")
        return np.where(mask, x, stats.means)

    @staticmethod
    def mean_impute_matrix(stats: ColumnStats, data: MaskedMatrix) -> MaskedMatrix:
        if data.n_cols != stats.n_features:
            raise ConfigurationError(f"Column stats cover {stats.n_features} features, matrix has {data.n_cols}")
        return data.filled(np.broadcast_to(stats.means, data.shape))

    @staticmethod
    def sentinel_impute(data: MaskedMatrix, value: float = SENTINEL_VALUE) -> MaskedMatrix:
        """Fill every missing cell with one impossible value, leaving the detector unchanged"""
        if not np.isfinite(value):
            raise ConfigurationError(f"Sentinel fill value must be finite, got {value}")
        return data.filled(np.full(data.shape, float(value)))

    @staticmethod
    def ridge_fit(X, y, ridge_lambda: float = 0.01) -> RidgePosterior:
        """
        Bayesian ridge regression with an unpenalized intercept

        coef = (X'X + lambda I)^-1 X'y, noise_var = RSS / max(1, n - p),
        coef_cov = noise_var (X'X + lambda I)^-1
        """
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] < 2:
            raise ConfigurationError(f"Ridge regression needs at least 2 rows, got {X.shape[0]}")
        if ridge_lambda <= 0:
            raise ConfigurationError(f"ridge_lambda must be positive, got {ridge_lambda}")

        Xi = _with_intercept(X)
        n, p = Xi.shape
        penalty = ridge_lambda * np.eye(p)
        penalty[-1, -1] = 0.0
        factor = scipy.linalg.cho_factor(Xi.T @ Xi + penalty)
        coef = scipy.linalg.cho_solve(factor, Xi.T @ y)
        inv = scipy.linalg.cho_solve(factor, np.eye(p))
        residuals = y - Xi @ coef
        noise_var = float(residuals @ residuals) / max(1, n - p)
        return RidgePosterior(coef_mean=coef, coef_cov=noise_var * (inv + inv.T) / 2, noise_var=noise_var)

    @staticmethod
    def run_mice(test: MaskedMatrix, train: Optional[MaskedMatrix], cfg: MiceConfig = None,
                 rng: SeededRng = None) -> ImputationResult:
        """
        Chained-equations imputation of the missing cells of `test`

        Each pass visits the columns with missing cells in ascending order,
        regresses column j on the others over the corpus rows where j was
        observed, and redraws every missing cell of j from the posterior
        predictive. A cell's imputation is the mean of its post-burn-in draws.

        Args:
            test: Matrix to complete
            train: Fully observed training matrix (joins the corpus when cfg.corpus is train+test)
            cfg: Ridge penalty, pass counts and corpus switch
            rng: Source of randomness

        Returns:
            ImputationResult with the completed matrix
        """
        cfg = cfg or MiceConfig()
        if rng is None:
            raise ConfigurationError("An explicit SeededRng is required")
        if test.is_complete():
            return ImputationResult(matrix=test)

        use_train = cfg.corpus == "train+test" and train is not None
        if use_train:
            if train.n_cols != test.n_cols:
                raise ConfigurationError(f"Train has {train.n_cols} columns, test has {test.n_cols}")
            if not train.is_complete():
                raise UnsupportedInputError("MICE training data must not contain missing values")
            n_train = train.n_rows
            corpus = np.vstack((train.values, test.to_array(fill=0.0)))
            observed = np.vstack((train.mask, test.mask))
        else:
            n_train = 0
            corpus = test.to_array(fill=0.0)
            observed = np.array(test.mask)

        gen = rng.generator
        d = test.n_cols
        counts = observed.sum(axis=0)
        fallback = [j for j in range(d) if counts[j] < 2 and not test.mask[:, j].all()]
        for j in range(d):
            col = corpus[observed[:, j], j]
            corpus[~observed[:, j], j] = col.mean() if col.size else 0.0
        if fallback:
            logger.warning(f"MICE column(s) {[test.columns[j] for j in fallback]} have fewer than 2 observed "
                           f"values; imputed with the lone observed value or 0 instead")

        targets = [j for j in range(d) if not test.mask[:, j].all() and j not in fallback]
        missing_rows = {j: np.flatnonzero(~test.mask[:, j]) + n_train for j in targets}
        kept = cfg.total_passes - cfg.burn_in
        accum = np.zeros_like(corpus)

        for sweep in range(cfg.total_passes):
            for j in targets:
                others = np.array([c for c in range(d) if c != j], dtype=int)
                fit_rows = observed[:, j]
                posterior = ImputeService.ridge_fit(corpus[np.ix_(fit_rows, others)], corpus[fit_rows, j],
                                                    cfg.ridge_lambda)
                rows = missing_rows[j]
                coefs = gen.multivariate_normal(posterior.coef_mean, posterior.coef_cov, size=rows.size)
                design = _with_intercept(corpus[np.ix_(rows, others)])
                draws = np.sum(design * coefs, axis=1) + np.sqrt(posterior.noise_var) * gen.standard_normal(rows.size)
                corpus[rows, j] = draws
                if sweep >= cfg.burn_in:
                    accum[rows, j] += draws

        completed = corpus[n_train:].copy()
        for j in targets:
            rows = missing_rows[j]
            completed[rows - n_train, j] = accum[rows, j] / kept

        logger.info(f"MICE imputed {int((~test.mask).sum())} cell(s) over {cfg.total_passes} passes "
                    f"({kept} averaged), corpus {cfg.corpus if use_train else 'test-only'}")
        return ImputationResult(
            matrix=MaskedMatrix(completed, np.ones_like(test.mask), test.columns),
            samples_averaged=kept,
            fallback_columns=fallback,
        )

    @staticmethod
    def mice_impute(test: MaskedMatrix, train: Optional[MaskedMatrix], cfg: MiceConfig = None,
                    rng: SeededRng = None) -> MaskedMatrix:
        return ImputeService.run_mice(test, train, cfg, rng).matrix


impute_service = ImputeService()

column_stats = impute_service.column_stats
mean_impute = impute_service.mean_impute
mean_impute_matrix = impute_service.mean_impute_matrix
sentinel_impute = impute_service.sentinel_impute
ridge_fit = impute_service.ridge_fit
run_mice = impute_service.run_mice
mice_impute = impute_service.mice_impute
