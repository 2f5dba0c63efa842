# services/iforest_service.py
"""Isolation Forest with three ways of scoring rows that have missing values.

* baseline: ordinary routing; every feature tested on the path must be
  observed (the caller imputes first).
* proportional: at a node testing a missing feature the query descends both
  subtrees and the depths are combined with the training split fractions.
* reduced: trees are grown on random subsets of ceil(sqrt(d)) features and a
  query is scored only by the trees whose subset it fully observes.

Depth bookkeeping: the root is depth 0 and every edge adds 1. A leaf holding
s > 1 training rows is credited with expected_depth(s) extra depth.
"""
import math
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import ClassVar, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from gapscore.data.models import MaskedMatrix, RowScore, ScoreResult, reduced_quorum
from gapscore.data.rng import SeededRng
from gapscore.utils.errors import ConfigurationError, ContractViolationError, DomainError, UnsupportedInputError
from gapscore.utils.validators import validate_subsample

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649
NEUTRAL_SCORE = 0.5
STRATEGIES = ("baseline", "proportional", "reduced")


@dataclass
class Leaf:
    size: int
    depth: int

    def to_dict(self) -> dict:
        return {"size": self.size, "depth": self.depth}


@dataclass
class Internal:
    feature: int
    threshold: float
    lo: float
    hi: float
    p_left: float
    left: "TreeNode"
    right: "TreeNode"

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "lo": self.lo,
            "hi": self.hi,
            "p_left": self.p_left,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }


TreeNode = Union[Leaf, Internal]


def node_from_dict(data: dict) -> TreeNode:
    if "feature" not in data:
        return Leaf(size=int(data["size"]), depth=int(data["depth"]))
    return Internal(
        feature=int(data["feature"]),
        threshold=float(data["threshold"]),
        lo=float(data["lo"]),
        hi=float(data["hi"]),
        p_left=float(data["p_left"]),
        left=node_from_dict(data["left"]),
        right=node_from_dict(data["right"]),
    )


@dataclass
class IsolationForest:
    ALGORITHM: ClassVar[str] = "iforest"

    trees: List[TreeNode]
    feature_sets: List[Tuple[int, ...]]
    subsample_size: int
    normalizer: float
    n_features: int
    reduced: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "subsample_size": self.subsample_size,
            "normalizer": self.normalizer,
            "reduced": self.reduced,
            "feature_sets": [list(fs) for fs in self.feature_sets],
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IsolationForest":
        return cls(
            trees=[node_from_dict(tree) for tree in data["trees"]],
            feature_sets=[tuple(int(j) for j in fs) for fs in data["feature_sets"]],
            subsample_size=int(data["subsample_size"]),
            normalizer=float(data["normalizer"]),
            n_features=int(data["n_features"]),
            reduced=bool(data.get("reduced", False)),
        )


def subset_size(d: int) -> int:
    """ceil(sqrt(d)) computed exactly in integers"""
    k = math.isqrt(d)
    return k if k * k == d else k + 1


@lru_cache(maxsize=4096)
def _harmonic(i: int) -> float:
    return math.log(i) + EULER_GAMMA if i >= 1 else 0.0


@lru_cache(maxsize=4096)
def _expected_depth(n: int) -> float:
    if n == 1:
        return 0.0
    return 2.0 * _harmonic(n - 1) - 2.0 * (n - 1) / n


def _grow_node(X: np.ndarray, depth: int, features: np.ndarray, gen: np.random.Generator) -> TreeNode:
    n = X.shape[0]
    if n <= 1:
        return Leaf(size=n, depth=depth)

    lo = X[:, features].min(axis=0)
    hi = X[:, features].max(axis=0)
    candidates = np.flatnonzero(lo < hi)
    if candidates.size == 0:
        return Leaf(size=n, depth=depth)

    pick = candidates[gen.integers(candidates.size)]
    j = int(features[pick])
    lo_j, hi_j = float(lo[pick]), float(hi[pick])
    theta = gen.uniform(lo_j, hi_j)
    while theta <= lo_j:
        theta = gen.uniform(lo_j, hi_j)

    goes_left = X[:, j] >= theta
    return Internal(
        feature=j,
        threshold=float(theta),
        lo=lo_j,
        hi=hi_j,
        p_left=float(goes_left.mean()),
        left=_grow_node(X[goes_left], depth + 1, features, gen),
        right=_grow_node(X[~goes_left], depth + 1, features, gen),
    )


def _grow_tree(X: np.ndarray, size: int, reduced: bool, rng: SeededRng):
    gen = rng.generator
    d = X.shape[1]
    if reduced:
        features = np.sort(gen.choice(d, size=subset_size(d), replace=False))
    else:
        features = np.arange(d)
    rows = gen.choice(X.shape[0], size=size, replace=False)
    return _grow_node(X[rows], 0, features, gen), tuple(int(j) for j in features)


def _remaining_depth(node: TreeNode, values: np.ndarray, mask: np.ndarray, rows: np.ndarray,
                     proportional: bool) -> np.ndarray:
    """Depth still to be accumulated below `node` for each of `rows`"""
    if isinstance(node, Leaf):
        return np.full(rows.size, _expected_depth(node.size)) if node.size >= 1 else np.zeros(rows.size)

    out = np.zeros(rows.size)
    observed = mask[rows, node.feature]
    v = values[rows, node.feature]
    inside = observed & (v >= node.lo) & (v <= node.hi)
    go_left = inside & (v >= node.threshold)
    go_right = inside & ~go_left

    if go_left.any():
        out[go_left] = 1.0 + _remaining_depth(node.left, values, mask, rows[go_left], proportional)
    if go_right.any():
        out[go_right] = 1.0 + _remaining_depth(node.right, values, mask, rows[go_right], proportional)

    missing = ~observed
    if missing.any():
        if not proportional:
            raise ContractViolationError(
                f"Feature {node.feature} is missing on the routing path; impute first or use proportional"
            )
        sub = rows[missing]
        left = _remaining_depth(node.left, values, mask, sub, proportional)
        right = _remaining_depth(node.right, values, mask, sub, proportional)
        out[missing] = 1.0 + node.p_left * left + (1.0 - node.p_left) * right
    return out


class IsolationForestService:
    """Fits isolation forests and scores (possibly incomplete) rows"""

    @staticmethod
    def expected_depth(n: int) -> float:
        """c(n) = 2 H(n-1) - 2 (n-1)/n with H(i) = ln(i) + gamma, c(1) = 0"""
        if n < 1:
            raise DomainError(f"expected_depth needs n >= 1, got {n}")
        return _expected_depth(int(n))

    @staticmethod
    def fit_iforest(data: MaskedMatrix, n_trees: int = 100, subsample: int = 256, reduced: bool = False,
                    rng: SeededRng = None, n_jobs: int = 1) -> IsolationForest:
        """
        Grow an isolation forest on complete training data

        Args:
            data: Fully observed training matrix
            n_trees: Number of isolation trees
            subsample: Rows drawn (without replacement) per tree
            reduced: Grow every tree on ceil(sqrt(d)) random features
            rng: Source of randomness; tree t uses rng.fork(t)
            n_jobs: joblib workers

        Returns:
            The fitted forest
        """
        errors = validate_subsample(subsample)
        if n_trees < 1:
            errors.append(f"n_trees must be at least 1, got {n_trees}")
        if rng is None:
            errors.append("An explicit SeededRng is required")
        if errors:
            raise ConfigurationError("; ".join(errors))
        if not data.is_complete():
            raise UnsupportedInputError("Isolation Forest training data must not contain missing values")
        if data.n_rows < 2:
            raise ConfigurationError(f"Need at least 2 training rows, got {data.n_rows}")

        X = np.asarray(data.values)
        size = min(subsample, data.n_rows)
        grown = Parallel(n_jobs=n_jobs)(
            delayed(_grow_tree)(X, size, reduced, rng.fork(t)) for t in range(n_trees)
        )

        forest = IsolationForest(
            trees=[tree for tree, _ in grown],
            feature_sets=[features for _, features in grown],
            subsample_size=size,
            normalizer=_expected_depth(size),
            n_features=data.n_cols,
            reduced=reduced,
        )
        logger.info(f"Fitted {'reduced ' if reduced else ''}isolation forest: {n_trees} trees, "
                    f"subsample {size}, d={data.n_cols}")
        return forest

    @staticmethod
    def isolation_depth(tree: TreeNode, x, mask=None, strategy: str = "baseline") -> float:
        """Isolation depth of one row in one tree (root is depth 0)"""
        if strategy not in ("baseline", "proportional"):
            raise ConfigurationError(f"isolation_depth strategy must be baseline or proportional, got '{strategy}'")
        values = np.atleast_2d(np.asarray(x, dtype=float))
        mask = ~np.isnan(values) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        depth = _remaining_depth(tree, values, mask, np.arange(1), strategy == "proportional")
        return float(depth[0])

    @staticmethod
    def score_matrix(forest: IsolationForest, data: MaskedMatrix, strategy: str = "baseline",
                     min_members: Optional[int] = None) -> ScoreResult:
        """
        Anomaly scores exp(-mean depth / z) for every row of `data`

        Reduced scoring averages the trees whose feature subset is observed in
        the row; a row with fewer than `min_members` such trees (default
        reduced_quorum(n_trees)) gets the neutral score and is flagged.
        """
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"Unknown Isolation Forest strategy '{strategy}'")
        if data.n_cols != forest.n_features:
            raise ConfigurationError(f"Forest expects {forest.n_features} features, got {data.n_cols}")

        values, mask = data.values, data.mask
        rows = np.arange(data.n_rows)
        z = forest.normalizer

        if strategy != "reduced":
            total = np.zeros(data.n_rows)
            for tree in forest.trees:
                total += _remaining_depth(tree, values, mask, rows, strategy == "proportional")
            return ScoreResult(np.exp(-(total / forest.n_trees) / z))

        sums = np.zeros(data.n_rows)
        counts = np.zeros(data.n_rows, dtype=int)
        for tree, features in zip(forest.trees, forest.feature_sets):
            applicable = np.flatnonzero(mask[:, list(features)].all(axis=1))
            if applicable.size == 0:
                continue
            depth = _remaining_depth(tree, values, mask, applicable, False)
            sums[applicable] += np.exp(-depth / z)
            counts[applicable] += 1

        quorum = reduced_quorum(forest.n_trees) if min_members is None else max(1, int(min_members))
        not_scored = counts < quorum
        scores = np.full(data.n_rows, NEUTRAL_SCORE)
        scores[~not_scored] = sums[~not_scored] / counts[~not_scored]
        if not_scored.any():
            logger.warning(f"{int(not_scored.sum())} of {data.n_rows} row(s) have fewer than {quorum} applicable reduced tree(s); "
                           f"assigned neutral score {NEUTRAL_SCORE}")
        return ScoreResult(scores, not_scored)

    @staticmethod
    def score_iforest(forest: IsolationForest, x, mask=None, strategy: str = "baseline",
                      min_members: Optional[int] = None) -> RowScore:
        values = np.atleast_2d(np.asarray(x, dtype=float))
        mask = ~np.isnan(values) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        result = IsolationForestService.score_matrix(forest, MaskedMatrix(values, mask), strategy, min_members)
        return RowScore(float(result.scores[0]), bool(result.not_scored[0]))


iforest_service = IsolationForestService()

expected_depth = iforest_service.expected_depth
fit_iforest = iforest_service.fit_iforest
isolation_depth = iforest_service.isolation_depth
score_iforest = iforest_service.score_iforest
score_matrix = iforest_service.score_matrix
