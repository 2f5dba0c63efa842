# services/egmm_service.py
"""Ensemble of Gaussian mixture models.

For each component count k, GMMs are fitted by EM to bootstrap resamples of
the training data and judged by their mean out-of-bag log-likelihood. Every
model of a k whose score is within 15% of the best k is kept. A row is scored
by the mean -log density over the kept models; missing columns are integrated
out exactly (Gaussian marginals) or replaced by a tail probability.
"""
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

from gapscore.data.models import MaskedMatrix, RowScore, ScoreResult
from gapscore.data.rng import SeededRng
from gapscore.utils.errors import ConfigurationError, ContractViolationError, DomainError, UnsupportedInputError

logger = logging.getLogger(__name__)

REG_DELTA = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 200
RETAIN_FRACTION = 0.15
MAX_NEG_LOG_DENSITY = 1e9
DEFAULT_TAIL_SAMPLES = 2000
STRATEGIES = ("baseline", "marginal", "tail")


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    # penalized EM objective per iteration since the last re-seed/drop
    ll_trace: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> List[GaussianComponent]:
        return [GaussianComponent(float(w), m, c) for w, m, c in zip(self.weights, self.means, self.covs)]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "ll_trace": list(self.ll_trace),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Gmm":
        return cls(
            weights=np.asarray(data["weights"], dtype=float),
            means=np.atleast_2d(np.asarray(data["means"], dtype=float)),
            covs=np.asarray(data["covs"], dtype=float).reshape(len(data["weights"]), *(2 * [len(data["means"][0])])),
            ll_trace=[float(v) for v in data.get("ll_trace", [])],
        )


@dataclass
class EgmmModel:
    ALGORITHM: ClassVar[str] = "egmm"

    models: List[Gmm]
    kept_ks: List[int]
    n_features: int
    model_ks: List[int] = field(default_factory=list)
    oob_ll: Dict[int, float] = field(default_factory=dict)
    fallback_score: float = 0.0

    @property
    def n_models(self) -> int:
        return len(self.models)

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "kept_ks": list(self.kept_ks),
            "model_ks": list(self.model_ks),
            "oob_ll": {str(k): v for k, v in self.oob_ll.items()},
            "fallback_score": self.fallback_score,
            "models": [gmm.to_dict() for gmm in self.models],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EgmmModel":
        return cls(
            models=[Gmm.from_dict(m) for m in data["models"]],
            kept_ks=[int(k) for k in data["kept_ks"]],
            n_features=int(data["n_features"]),
            model_ks=[int(k) for k in data.get("model_ks", [])],
            oob_ll={int(k): float(v) for k, v in data.get("oob_ll", {}).items()},
            fallback_score=float(data.get("fallback_score", 0.0)),
        )


class TailEstimate(NamedTuple):
    probability: float
    stderr: float


def _component_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(x; mean, cov) for every row of X via a Cholesky factor"""
    L = scipy.linalg.cholesky(cov, lower=True)
    soln = scipy.linalg.solve_triangular(L, (X - mean).T, lower=True)
    d = X.shape[1]
    return -0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * np.sum(soln ** 2, axis=0)


def _mixture_logpdf(gmm: Gmm, X: np.ndarray, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """log sum_i w_i N(x[cols]; mean_i[cols], cov_i[cols, cols]) for every row of X (already restricted)"""
    if cols is None:
        cols = np.arange(gmm.n_features)
    terms = np.column_stack([
        np.log(w) + _component_logpdf(X, m[cols], c[np.ix_(cols, cols)])
        for w, m, c in zip(gmm.weights, gmm.means, gmm.covs)
    ])
    return logsumexp(terms, axis=1)


def _regularizer(X: np.ndarray) -> float:
    pooled = np.atleast_2d(np.cov(X, rowvar=False, bias=True))
    scale = np.trace(pooled) / X.shape[1]
    return REG_DELTA * (scale if scale > 0 else 1.0)


def _em(X: np.ndarray, k: int, gen: np.random.Generator, seed: int) -> Gmm:
    """
    Regularized EM from k-means++ seeds

    ll_trace holds the quantity the regularized M-step ascends, not the plain
    log-likelihood: mean over rows of logsumexp_i(log w_i + log N(x | m_i, S_i)
    - reg / 2 tr(S_i^-1)). That penalized objective is non-decreasing; the
    plain log-likelihood may dip by O(reg).
    """
    n, d = X.shape
    reg = _regularizer(X)
    eye = np.eye(d)
    pooled = np.atleast_2d(np.cov(X, rowvar=False, bias=True)) + reg * eye

    means, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed)
    means = np.array(means, dtype=float)
    covs = np.repeat(pooled[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    reseeded = np.zeros(k, dtype=bool)

    trace: List[float] = []
    for _ in range(EM_MAX_ITER):
        # E-step on the objective the regularized M-step ascends
        penalty = np.array([0.5 * reg * np.trace(np.linalg.inv(c)) for c in covs])
        terms = np.column_stack([
            np.log(w) + _component_logpdf(X, m, c) - p for w, m, c, p in zip(weights, means, covs, penalty)
        ])
        row_ll = logsumexp(terms, axis=1)
        objective = float(row_ll.mean())
        resp = np.exp(terms - row_ll[:, None])

        if trace and objective - trace[-1] < EM_TOL:
            trace.append(objective)
            break
        trace.append(objective)

        # M-step
        nk = resp.sum(axis=0)
        degenerate = nk < 1.0
        if degenerate.any():
            drop = degenerate & reseeded
            for i in np.flatnonzero(degenerate & ~reseeded):
                means[i] = X[gen.integers(n)]
                covs[i] = pooled
                nk[i] = n / k
                reseeded[i] = True
                logger.warning(f"EM component {i} of {k} collapsed; re-seeded at a random training row")
            if drop.any():
                logger.warning(f"Dropping {int(drop.sum())} EM component(s) that collapsed twice")
                keep = ~drop
                means, covs, reseeded, nk = means[keep], covs[keep], reseeded[keep], nk[keep]
                resp = resp[:, keep]
                degenerate = degenerate[keep]
                k = len(means)
            weights = nk / nk.sum()
            trace = []
            for i in np.flatnonzero(~degenerate):
                means[i] = resp[:, i] @ X / nk[i]
                diff = X - means[i]
                covs[i] = (resp[:, i, None] * diff).T @ diff / nk[i] + reg * eye
            continue

        weights = nk / nk.sum()
        means = (resp.T @ X) / nk[:, None]
        for i in range(k):
            diff = X - means[i]
            covs[i] = (resp[:, i, None] * diff).T @ diff / nk[i] + reg * eye

    return Gmm(weights=weights, means=means, covs=np.array(covs), ll_trace=trace)


def _fit_bootstrap(X: np.ndarray, k: int, rng: SeededRng) -> Tuple[Gmm, Optional[float]]:
    gen = rng.generator
    n = X.shape[0]
    oob = np.array([], dtype=int)
    for _ in range(2):
        idx = gen.integers(n, size=n)
        oob = np.setdiff1d(np.arange(n), idx)
        if oob.size:
            break

    gmm = EgmmService.fit_gmm(MaskedMatrix(X[idx], np.ones((n, X.shape[1]), dtype=bool)), k, rng.fork(0))
    if not oob.size:
        logger.warning(f"Bootstrap replicate for k={k} has an empty out-of-bag set twice; excluded from selection")
        return gmm, None
    return gmm, float(_mixture_logpdf(gmm, X[oob]).mean())


def _neg_log(ll: np.ndarray) -> np.ndarray:
    return np.minimum(-ll, MAX_NEG_LOG_DENSITY)


class EgmmService:
    """Fits EGMM ensembles and scores rows by full, marginal or tail density"""

    @staticmethod
    def fit_gmm(data: MaskedMatrix, k: int, rng: SeededRng) -> Gmm:
        """EM for a k-component full-covariance GMM, k-means++ seeded"""
        if k < 1:
            raise ConfigurationError(f"Component count must be at least 1, got {k}")
        if not data.is_complete():
            raise UnsupportedInputError("GMM training data must not contain missing values")
        if data.n_rows < k:
            raise ConfigurationError(f"Need at least k={k} rows to fit a GMM, got {data.n_rows}")
        X = np.asarray(data.values)
        gmm = _em(X, k, rng.generator, rng.sklearn_seed())
        logger.debug(f"EM k={k}: {len(gmm.ll_trace)} iteration(s), final objective "
                     f"{gmm.ll_trace[-1] if gmm.ll_trace else float('nan'):.6f}")
        return gmm

    @staticmethod
    def log_density(gmm: Gmm, x) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if np.isnan(x).any():
            raise ContractViolationError("log_density needs a fully observed row; use marginal_log_density")
        return float(_mixture_logpdf(gmm, x)[0])

    @staticmethod
    def marginal_log_density(gmm: Gmm, x, mask=None) -> float:
        """Log density of the observed coordinates with the missing ones integrated out"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mask = ~np.isnan(x) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        cols = np.flatnonzero(mask[0])
        if cols.size == 0:
            raise DomainError("Cannot compute a marginal density with zero observed columns")
        return float(_mixture_logpdf(gmm, x[:, cols], cols)[0])

    @staticmethod
    def select_ks(per_k_ll: Dict[int, float]) -> List[int]:
        """Keep every k whose mean OOB log-likelihood is >= best - 0.15 |best|"""
        scored = {k: v for k, v in per_k_ll.items() if v is not None and np.isfinite(v)}
        if not scored:
            raise ConfigurationError("No component count has an out-of-bag log-likelihood")
        best = max(scored.values())
        threshold = best - RETAIN_FRACTION * abs(best)
        return sorted(k for k, v in scored.items() if v >= threshold)

    @staticmethod
    def fit_egmm(data: MaskedMatrix, ks: Sequence[int] = (3, 4, 5), reps_per_k: int = 15,
                 rng: SeededRng = None, n_jobs: int = 1) -> EgmmModel:
        """
        Fit reps_per_k bootstrap GMMs for every k and keep the models of the good ks

        Args:
            data: Fully observed training matrix
            ks: Candidate component counts
            reps_per_k: Bootstrap replicates per k
            rng: Source of randomness; replicate r of k uses rng.fork(k, r)
            n_jobs: joblib workers

        Returns:
            EgmmModel with the retained mixtures
        """
        if rng is None:
            raise ConfigurationError("An explicit SeededRng is required")
        if reps_per_k < 1 or not ks:
            raise ConfigurationError("fit_egmm needs at least one k and one replicate")
        if not data.is_complete():
            raise UnsupportedInputError("EGMM training data must not contain missing values")

        X = np.asarray(data.values)
        jobs = [(k, r) for k in ks for r in range(reps_per_k)]
        fitted = Parallel(n_jobs=n_jobs)(delayed(_fit_bootstrap)(X, k, rng.fork(k, r)) for k, r in jobs)

        per_k: Dict[int, float] = {}
        for k in ks:
            lls = [ll for (kk, _), (_, ll) in zip(jobs, fitted) if kk == k and ll is not None]
            per_k[k] = float(np.mean(lls)) if lls else None
        kept = EgmmService.select_ks(per_k)

        model = EgmmModel(
            models=[gmm for (k, _), (gmm, _) in zip(jobs, fitted) if k in kept],
            kept_ks=kept,
            n_features=data.n_cols,
            model_ks=[k for k, _ in jobs if k in kept],
            oob_ll={k: v for k, v in per_k.items() if v is not None},
        )
        model.fallback_score = float(EgmmService.score_matrix(model, data).scores.mean())
        logger.info(f"Fitted EGMM: {len(jobs)} mixtures, kept ks {kept} ({model.n_models} models), "
                    f"OOB log-likelihood {', '.join(f'{k}: {v:.4f}' for k, v in model.oob_ll.items())}")
        return model

    @staticmethod
    def tail_probability(gmm: Gmm, x, mask=None, n_samples: int = DEFAULT_TAIL_SAMPLES,
                         rng: SeededRng = None) -> TailEstimate:
        """Monte-Carlo estimate of P(p(X) <= p(x)) under the (marginal) mixture, with its standard error"""
        if n_samples < 1:
            raise ConfigurationError(f"n_samples must be at least 1, got {n_samples}")
        if rng is None:
            raise ConfigurationError("An explicit SeededRng is required")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mask = ~np.isnan(x) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        cols = np.flatnonzero(mask[0])
        if cols.size == 0:
            raise DomainError("Cannot compute a tail probability with zero observed columns")

        sample_ll = np.sort(_mixture_logpdf(gmm, _sample(gmm, n_samples, rng.generator)[:, cols], cols))
        query_ll = _mixture_logpdf(gmm, x[:, cols], cols)
        p = float(np.searchsorted(sample_ll, query_ll, side="right")[0]) / n_samples
        return TailEstimate(p, float(np.sqrt(p * (1.0 - p) / n_samples)))

    @staticmethod
    def score_matrix(model: EgmmModel, data: MaskedMatrix, strategy: str = "baseline",
                     allow_fallback: bool = False, n_samples: int = DEFAULT_TAIL_SAMPLES,
                     rng: SeededRng = None) -> ScoreResult:
        """
        Scores for every row of `data`

        baseline needs complete rows. marginal and tail integrate out missing
        columns; rows with no observed column raise DomainError unless
        allow_fallback, in which case they get model.fallback_score and are
        flagged.
        """
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"Unknown EGMM strategy '{strategy}'")
        if data.n_cols != model.n_features:
            raise ConfigurationError(f"Model expects {model.n_features} features, got {data.n_cols}")

        if strategy == "baseline" or (strategy == "marginal" and data.is_complete()):
            if not data.is_complete():
                raise ContractViolationError("Baseline EGMM scoring needs fully observed rows; impute first or use marginal")
            X = np.asarray(data.values)
            neg = np.column_stack([_neg_log(_mixture_logpdf(gmm, X)) for gmm in model.models])
            return ScoreResult(neg.mean(axis=1))

        if strategy == "tail" and rng is None:
            raise ConfigurationError("Tail-probability scoring needs an explicit SeededRng")

        patterns, inverse = np.unique(data.mask, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        scores = np.empty(data.n_rows)
        not_scored = np.zeros(data.n_rows, dtype=bool)
        samples = None
        if strategy == "tail":
            samples = [_sample(gmm, n_samples, rng.fork(m).generator) for m, gmm in enumerate(model.models)]

        for p, pattern in enumerate(patterns):
            rows = np.flatnonzero(inverse == p)
            cols = np.flatnonzero(pattern)
            if cols.size == 0:
                if not allow_fallback:
                    raise DomainError(f"{rows.size} row(s) have zero observed columns; nothing to marginalize onto")
                scores[rows] = model.fallback_score
                not_scored[rows] = True
                continue

            Xp = data.values[np.ix_(rows, cols)]
            if strategy == "marginal":
                neg = np.column_stack([_neg_log(_mixture_logpdf(gmm, Xp, cols)) for gmm in model.models])
                scores[rows] = neg.mean(axis=1)
            else:
                tails = np.column_stack([
                    np.searchsorted(np.sort(_mixture_logpdf(gmm, s[:, cols], cols)),
                                    _mixture_logpdf(gmm, Xp, cols), side="right") / n_samples
                    for gmm, s in zip(model.models, samples)
                ])
                scores[rows] = 1.0 - tails.mean(axis=1)

        if not_scored.any():
            logger.warning(f"{int(not_scored.sum())} of {data.n_rows} row(s) have no observed column; "
                           f"assigned fallback score {model.fallback_score:.6g}")
        return ScoreResult(scores, not_scored)

    @staticmethod
    def score_egmm(model: EgmmModel, x, mask=None, strategy: str = "baseline",
                   n_samples: int = DEFAULT_TAIL_SAMPLES, rng: SeededRng = None) -> RowScore:
        values = np.atleast_2d(np.asarray(x, dtype=float))
        mask = ~np.isnan(values) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        result = EgmmService.score_matrix(model, MaskedMatrix(values, mask), strategy,
                                          n_samples=n_samples, rng=rng)
        return RowScore(float(result.scores[0]), bool(result.not_scored[0]))


def _sample(gmm: Gmm, n_samples: int, gen: np.random.Generator) -> np.ndarray:
    counts = gen.multinomial(n_samples, gmm.weights / gmm.weights.sum())
    draws = [gen.multivariate_normal(m, c, size=int(c_n)) for m, c, c_n in zip(gmm.means, gmm.covs, counts)]
    return np.vstack(draws)


egmm_service = EgmmService()

fit_gmm = egmm_service.fit_gmm
log_density = egmm_service.log_density
marginal_log_density = egmm_service.marginal_log_density
select_ks = egmm_service.select_ks
fit_egmm = egmm_service.fit_egmm
tail_probability = egmm_service.tail_probability
score_matrix = egmm_service.score_matrix
score_egmm = egmm_service.score_egmm
