# services/synth_service.py
"""Synthetic benchmark data and missingness injection.

Three injection modes hide cells completely at random:

    mcar       every row loses a fraction rho of its features
    instances  a fraction rho of the rows each lose feature_rate of their features
    features   a random row_fraction of the rows each lose a fraction rho
"""
import math
import logging
from dataclasses import dataclass
from typing import get_args

import numpy as np

from gapscore.config import RHO_CORR_GRID, InjectionMode, SynthConfig, build
from gapscore.data.models import LabeledDataset, MaskedMatrix
from gapscore.data.rng import SeededRng
from gapscore.utils.errors import ConfigurationError, UnsupportedInputError
from gapscore.utils.validators import validate_fraction, validate_rho

logger = logging.getLogger(__name__)

ANOMALY_SHIFT = 3.0
CENTER_RANGE = 3.0
NOISE_RANGE = 1.0
MIXTURE_CENTER = 3.0
MIXTURE_OFFSET = 2.0

INJECTION_MODES = get_args(InjectionMode)
INSTANCE_FEATURE_RATE = 0.10
DAMAGED_ROW_FRACTION = 0.20


@dataclass(frozen=True)
class MissingnessPlan:
    """How many features each row loses: m_low for most rows, m_low + 1 for n_high of them"""

    rho: float
    n_rows: int
    n_cols: int
    m_low: int
    n_high: int

    @property
    def total_missing(self) -> int:
        return self.m_low * self.n_rows + self.n_high


def _split_sizes(cfg: SynthConfig):
    n_nominal = int(round((1.0 - cfg.anomaly_frac) * cfg.n))
    return n_nominal, cfg.n - n_nominal


def _alternating(d: int) -> np.ndarray:
    return np.where(np.arange(d) % 2 == 0, 1.0, -1.0)


def _shuffled(nominal: np.ndarray, anomalies: np.ndarray, gen: np.random.Generator, name: str) -> LabeledDataset:
    X = np.vstack((nominal, anomalies))
    y = np.concatenate((np.zeros(len(nominal), dtype=int), np.ones(len(anomalies), dtype=int)))
    order = gen.permutation(len(y))
    return LabeledDataset(features=MaskedMatrix.from_array(X[order]), labels=y[order], name=name)


def _check_config(cfg: SynthConfig, expected: str) -> None:
    if cfg.config != expected:
        raise ConfigurationError(f"Generator for '{expected}' data called with config '{cfg.config}'")


def equicorrelation(d: int, c: float, rho: float) -> np.ndarray:
    """d x d matrix with c on the diagonal and rho elsewhere"""
    sigma = np.full((d, d), float(rho))
    np.fill_diagonal(sigma, c)
    return sigma


def mixture_covariance(d: int, diagonal: float, rho: float) -> np.ndarray:
    L = np.tril(equicorrelation(d, diagonal, rho))
    return L @ L.T


def mixture_means(d: int) -> np.ndarray:
    return np.vstack((
        np.full(d, -MIXTURE_CENTER),
        MIXTURE_CENTER * _alternating(d),
        np.full(d, MIXTURE_CENTER),
    ))


def _require_complete(data: MaskedMatrix, mode: str) -> None:
    if not data.is_complete():
        raise UnsupportedInputError(f"{mode} injection expects a fully observed matrix")


def _hide(data: MaskedMatrix, counts: np.ndarray, gen: np.random.Generator, label: str) -> MaskedMatrix:
    """Hide counts[i] uniformly chosen cells of row i"""
    order = np.argsort(gen.random(data.shape), axis=1)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(data.n_cols)[None, :].repeat(data.n_rows, axis=0), axis=1)
    missing = rank < counts[:, None]

    empty = int((counts >= data.n_cols).sum())
    if empty:
        logger.warning(f"{label} left {empty} row(s) with every feature missing")
    return data.with_mask(~missing)


class SynthService:
    @staticmethod
    def gen_uncorrelated(cfg: SynthConfig, rng: SeededRng) -> LabeledDataset:
        """Nominals ~ N(0, I), anomalies ~ N(3, I)"""
        _check_config(cfg, "uncorrelated")
        gen = rng.generator
        n_nominal, n_anomalies = _split_sizes(cfg)
        nominal = gen.standard_normal((n_nominal, cfg.d))
        anomalies = ANOMALY_SHIFT + gen.standard_normal((n_anomalies, cfg.d))
        return _shuffled(nominal, anomalies, gen, "uncorrelated")

    @staticmethod
    def gen_noise(cfg: SynthConfig, rng: SeededRng) -> LabeledDataset:
        """Uncorrelated data plus n_noise Uniform(-1, 1) columns shared by both classes"""
        _check_config(cfg, "noise")
        base = SynthService.gen_uncorrelated(cfg.model_copy(update={"config": "uncorrelated"}), rng.fork(0))
        noise = rng.fork(1).generator.uniform(-NOISE_RANGE, NOISE_RANGE, size=(cfg.n, cfg.n_noise))
        X = np.hstack((base.features.values, noise))
        return LabeledDataset(features=MaskedMatrix.from_array(X), labels=base.labels, name="noise")

    @staticmethod
    def gen_correlated(cfg: SynthConfig, rng: SeededRng) -> LabeledDataset:
        """Points scattered along the diagonal; anomalies pushed off it along (+1, -1, +1, ...)"""
        _check_config(cfg, "correlated")
        if not cfg.c > cfg.rho_corr:
            raise ConfigurationError(f"c={cfg.c} must exceed rho_corr={cfg.rho_corr}")
        gen = rng.generator
        n_nominal, n_anomalies = _split_sizes(cfg)
        sigma = equicorrelation(cfg.d, cfg.c, cfg.rho_corr)

        def draw(n: int, offset: np.ndarray) -> np.ndarray:
            centers = gen.uniform(-CENTER_RANGE, CENTER_RANGE, size=n)[:, None] * np.ones(cfg.d)
            return centers + offset + gen.multivariate_normal(np.zeros(cfg.d), sigma, size=n)

        nominal = draw(n_nominal, np.zeros(cfg.d))
        anomalies = draw(n_anomalies, cfg.b * _alternating(cfg.d))
        return _shuffled(nominal, anomalies, gen, "correlated")

    @staticmethod
    def gen_mixture(cfg: SynthConfig, rng: SeededRng) -> LabeledDataset:
        """Three nominal Gaussians and one anomaly Gaussian near their centre"""
        _check_config(cfg, "mixture")
        gen = rng.generator
        n_nominal, n_anomalies = _split_sizes(cfg)
        means = mixture_means(cfg.d)
        covs = [mixture_covariance(cfg.d, diag, cfg.rho_corr) for diag in (cfg.c, 1.0, cfg.c)]

        component = gen.integers(3, size=n_nominal)
        nominal = np.empty((n_nominal, cfg.d))
        for i in range(3):
            rows = np.flatnonzero(component == i)
            nominal[rows] = gen.multivariate_normal(means[i], covs[i], size=rows.size)

        anomaly_mean = gen.uniform(-1.0, 1.0, size=cfg.d) + MIXTURE_OFFSET * _alternating(cfg.d)
        anomalies = anomaly_mean + gen.standard_normal((n_anomalies, cfg.d))
        return _shuffled(nominal, anomalies, gen, "mixture")

    @staticmethod
    def generate(cfg: SynthConfig, rng: SeededRng) -> LabeledDataset:
        generators = {
            "uncorrelated": SynthService.gen_uncorrelated,
            "noise": SynthService.gen_noise,
            "correlated": SynthService.gen_correlated,
            "mixture": SynthService.gen_mixture,
        }
        data = generators[cfg.config](cfg, rng)
        logger.info(f"Generated {cfg.config} data: {data.features.n_rows} rows, {data.features.n_cols} features, "
                    f"{data.n_anomalies} anomalies")
        return data

    @staticmethod
    def replicate_config(cfg: SynthConfig, replicate: int) -> SynthConfig:
        """Replicate r of correlated/mixture data uses the r-th rho_corr of the rotation"""
        if cfg.config not in ("correlated", "mixture"):
            return cfg
        return build(SynthConfig, cfg.model_dump(), rho_corr=RHO_CORR_GRID[replicate % len(RHO_CORR_GRID)])

    @staticmethod
    def plan_mcar(n_rows: int, n_cols: int, rho: float) -> MissingnessPlan:
        errors = validate_rho(rho)
        if errors:
            raise ConfigurationError("; ".join(errors))
        # round away float noise such as 0.3 * 8 = 2.4000000000000004
        mu = round(rho * n_cols, 9)
        m_low = math.floor(mu)
        n_high = int(round((mu - m_low) * n_rows))
        return MissingnessPlan(rho=rho, n_rows=n_rows, n_cols=n_cols, m_low=m_low, n_high=n_high)

    @staticmethod
    def inject_mcar(data: MaskedMatrix, rho: float, rng: SeededRng) -> MaskedMatrix:
        """
        Hide a fraction rho of every row's features completely at random

        round(r n) rows chosen without replacement lose m_low + 1 features, the
        others m_low, where m_low + r = rho d. The positions depend only on the
        generator, never on the values.
        """
        plan = SynthService.plan_mcar(data.n_rows, data.n_cols, rho)
        if plan.m_low == 0 and plan.n_high == 0:
            return data
        _require_complete(data, "mcar")

        gen = rng.generator
        counts = np.full(data.n_rows, plan.m_low)
        counts[gen.choice(data.n_rows, size=plan.n_high, replace=False)] += 1
        return _hide(data, counts, gen, f"MCAR injection at rho={rho}")

    @staticmethod
    def inject_instances(data: MaskedMatrix, rho: float, rng: SeededRng,
                         feature_rate: float = INSTANCE_FEATURE_RATE) -> MaskedMatrix:
        """
        Damage round(rho n) rows chosen without replacement; each loses
        max(1, round(feature_rate d)) features, the other rows stay complete
        """
        errors = validate_rho(rho) + validate_fraction("feature_rate", feature_rate)
        if errors:
            raise ConfigurationError("; ".join(errors))
        n_damaged = int(round(rho * data.n_rows))
        if n_damaged == 0:
            return data
        _require_complete(data, "instances")

        gen = rng.generator
        per_row = min(data.n_cols, max(1, int(round(round(feature_rate * data.n_cols, 9)))))
        counts = np.zeros(data.n_rows, dtype=int)
        counts[gen.choice(data.n_rows, size=n_damaged, replace=False)] = per_row
        return _hide(data, counts, gen, f"Instance injection at rho={rho}")

    @staticmethod
    def inject_features(data: MaskedMatrix, rho: float, rng: SeededRng,
                        row_fraction: float = DAMAGED_ROW_FRACTION) -> MaskedMatrix:
        """
        Damage a random round(row_fraction n) of the rows; within them a
        fraction rho of the features goes missing with the MCAR allocation
        """
        errors = validate_fraction("row_fraction", row_fraction)
        if errors:
            raise ConfigurationError("; ".join(errors))
        n_damaged = int(round(row_fraction * data.n_rows))
        plan = SynthService.plan_mcar(n_damaged, data.n_cols, rho)
        if n_damaged == 0 or (plan.m_low == 0 and plan.n_high == 0):
            return data
        _require_complete(data, "features")

        gen = rng.generator
        rows = gen.choice(data.n_rows, size=n_damaged, replace=False)
        damaged = np.full(n_damaged, plan.m_low)
        damaged[gen.choice(n_damaged, size=plan.n_high, replace=False)] += 1
        counts = np.zeros(data.n_rows, dtype=int)
        counts[rows] = damaged
        return _hide(data, counts, gen, f"Feature injection at rho={rho}")

    @staticmethod
    def inject(data: MaskedMatrix, rho: float, rng: SeededRng, mode: InjectionMode = "mcar",
               feature_rate: float = INSTANCE_FEATURE_RATE,
               row_fraction: float = DAMAGED_ROW_FRACTION) -> MaskedMatrix:
        if mode == "mcar":
            return SynthService.inject_mcar(data, rho, rng)
        if mode == "instances":
            return SynthService.inject_instances(data, rho, rng, feature_rate)
        if mode == "features":
            return SynthService.inject_features(data, rho, rng, row_fraction)
        raise ConfigurationError(f"Unknown injection mode '{mode}', expected one of {', '.join(INJECTION_MODES)}")


synth_service = SynthService()

gen_uncorrelated = synth_service.gen_uncorrelated
gen_noise = synth_service.gen_noise
gen_correlated = synth_service.gen_correlated
gen_mixture = synth_service.gen_mixture
generate = synth_service.generate
replicate_config = synth_service.replicate_config
plan_mcar = synth_service.plan_mcar
inject_mcar = synth_service.inject_mcar
inject_instances = synth_service.inject_instances
inject_features = synth_service.inject_features
inject = synth_service.inject
