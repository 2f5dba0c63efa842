# services/experiment_service.py
"""AUC evaluation and the missing-value decay experiment.

For every dataset and replicate the detectors are fitted once on the complete
data; the test set is the same data damaged at each rho of the grid by the
configured injection mode (mcar, instances or features). Every (algorithm,
strategy) pair is scored on the damaged data and its AUC recorded.

With grid.ensemble_scale = [1, 2, 3, 4] the detectors are additionally fitted
with 2x, 3x and 4x ensembles and scored on the same damaged matrices; those
records carry the dataset label 'name@Nx'.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import rankdata

from gapscore.config import ExperimentConfig
from gapscore.data.models import Algorithm, EvalRecord, LabeledDataset, MaskedMatrix, RECORD_COLUMNS, Strategy
from gapscore.data.repository import dataset_repo, result_repo
from gapscore.data.rng import SeededRng
from gapscore.services.egmm_service import egmm_service
from gapscore.services.iforest_service import iforest_service
from gapscore.services.impute_service import impute_service
from gapscore.services.loda_service import loda_service
from gapscore.services.synth_service import synth_service
from gapscore.utils.errors import ConfigurationError, FormatError, MissingBaselineError, UndefinedAucError

logger = logging.getLogger(__name__)

Z_95 = 1.96
SNAPSHOT_RHO = 0.5
ALGORITHM_INDEX = {algorithm: i for i, algorithm in enumerate(Algorithm)}
STRATEGY_INDEX = {strategy: i for i, strategy in enumerate(Strategy)}
GROUP_COLUMNS = ["dataset", "algorithm", "replicate"]
SUMMARY_COLUMNS = ["algorithm", "strategy", "rho", "mean_rel_auc", "ci_lo", "ci_hi"]

# fork tags under (dataset, replicate)
_DATA, _FIT, _CELL, _INJECT, _MICE = range(5)


class ExperimentService:
    @staticmethod
    def auc(scores, labels) -> float:
        """Mann-Whitney AUC with tied scores counted as half, via average ranks"""
        scores = np.asarray(scores, dtype=float).ravel()
        labels = np.asarray(labels).ravel()
        if scores.shape != labels.shape:
            raise FormatError(f"Got {scores.size} scores for {labels.size} labels")
        positive = labels == 1
        n_pos = int(positive.sum())
        n_neg = labels.size - n_pos
        if n_pos == 0 or n_neg == 0:
            raise UndefinedAucError("AUC needs at least one anomaly and one nominal label")

        ranks = rankdata(scores)
        u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
        return float(u_statistic / (n_pos * n_neg))

    @staticmethod
    def relative_table(records: List[EvalRecord]) -> pd.DataFrame:
        """
        Per-record relative AUC: auc / auc at rho = 0 in the same
        (dataset, algorithm, replicate) group

        Every strategy of a group shares one baseline: the full detector on the
        undamaged data. With no missing cells mean, mice, proportional,
        marginal and sentinel all score with that detector, so the first of
        them in strategy order is taken. The feature-bagged reduced forest is
        a different detector and only serves as baseline when it is the
        group's sole rho = 0 record.
        """
        if not records:
            return pd.DataFrame(columns=RECORD_COLUMNS + ["baseline_auc", "rel_auc"])
        frame = pd.DataFrame([record.to_dict() for record in records], columns=RECORD_COLUMNS)
        zero = frame[frame["rho"] == 0.0]

        order = {strategy.value: STRATEGY_INDEX[strategy] for strategy in Strategy}
        order[Strategy.REDUCED.value] = len(order)
        baseline = (zero.assign(preferred=zero["strategy"].map(order))
                    .sort_values(["preferred"], kind="mergesort").groupby(GROUP_COLUMNS)["auc"].first())

        baselines = []
        for row in frame.itertuples(index=False):
            group = (row.dataset, row.algorithm, row.replicate)
            if group in baseline.index:
                baselines.append(baseline.loc[group])
            else:
                raise MissingBaselineError(
                    f"No rho=0 record for dataset '{row.dataset}', algorithm '{row.algorithm}', "
                    f"replicate {row.replicate}"
                )
        frame["baseline_auc"] = np.asarray(baselines, dtype=float)
        frame["rel_auc"] = frame["auc"] / frame["baseline_auc"]
        return frame

    @staticmethod
    def relative_auc(records: List[EvalRecord]) -> pd.DataFrame:
        """Mean relative AUC over replicates per (dataset, algorithm, strategy, rho)"""
        table = ExperimentService.relative_table(records)
        return (table.groupby(["dataset", "algorithm", "strategy", "rho"], sort=True)["rel_auc"]
                .agg(mean_rel_auc="mean", n="count").reset_index())

    @staticmethod
    def summarize_decay(records: List[EvalRecord]) -> pd.DataFrame:
        """Mean relative AUC with a 95% normal interval per (algorithm, strategy, rho)"""
        if not records:
            raise ConfigurationError("Cannot summarize an empty record list")
        table = ExperimentService.relative_table(records)
        grouped = table.groupby(["algorithm", "strategy", "rho"], sort=True)["rel_auc"]
        summary = grouped.agg(mean_rel_auc="mean", sd="std", n="count").reset_index()
        half = Z_95 * summary["sd"].fillna(0.0) / np.sqrt(summary["n"])
        summary["ci_lo"] = summary["mean_rel_auc"] - half
        summary["ci_hi"] = summary["mean_rel_auc"] + half
        return summary[SUMMARY_COLUMNS]

    @staticmethod
    def summarize_at_rho(records: List[EvalRecord], rho: float = SNAPSHOT_RHO) -> pd.DataFrame:
        """
        Relative AUC of every (algorithm, strategy) per dataset at one rho,
        one row per dataset, sorted ascending by the mice relative AUC
        """
        table = ExperimentService.relative_table(records)
        table = table[np.isclose(table["rho"], rho)]
        if table.empty:
            return pd.DataFrame(columns=["dataset"])
        table = table.assign(method=table["algorithm"] + "_" + table["strategy"])
        wide = table.pivot_table(index="dataset", columns="method", values="rel_auc", aggfunc="mean")
        mice_columns = [c for c in wide.columns if c.endswith("_" + Strategy.MICE.value)]
        if mice_columns:
            wide = wide.assign(_order=wide[mice_columns].mean(axis=1)).sort_values(
                ["_order"], kind="mergesort", na_position="last").drop(columns="_order")
        return wide.reset_index()

    @staticmethod
    def run_experiment(cfg: ExperimentConfig) -> List[EvalRecord]:
        """
        Run every dataset x replicate x rho x (algorithm, strategy) cell

        Returns:
            EvalRecords sorted by (dataset, algorithm, strategy, rho, replicate)
        """
        master = SeededRng(cfg.master_seed)
        names = [entry.dataset_name for entry in cfg.dataset]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Dataset names must be unique, got {names}")

        loaded: Dict[int, LabeledDataset] = {}
        for ds, entry in enumerate(cfg.dataset):
            if entry.csv is not None:
                data = dataset_repo.load_csv(entry.csv, label_column=entry.label_column, sentinel=entry.sentinel)
                if data.labels is None:
                    raise ConfigurationError(f"Dataset {entry.csv} has no labels")
                loaded[ds] = data
            else:
                entry.synth_config()

        units = [(ds, rep) for ds in range(len(cfg.dataset)) for rep in range(cfg.grid.replicates)]
        logger.info(f"Running experiment: {len(cfg.dataset)} dataset(s) x {cfg.grid.replicates} replicate(s) x "
                    f"{len(cfg.grid.rho)} rho value(s), {cfg.jobs} job(s)")

        batches = Parallel(n_jobs=cfg.jobs)(
            delayed(_run_unit)(cfg, ds, rep, loaded.get(ds), master.fork(ds, rep)) for ds, rep in units
        )
        records = [record for batch in batches for record in batch]
        records.sort(key=lambda r: (r.dataset, r.algorithm.value, r.strategy.value, r.rho, r.replicate))
        logger.info(f"Experiment finished with {len(records)} record(s)")
        return records

    @staticmethod
    def write_outputs(records: List[EvalRecord], out_dir) -> Dict[str, Path]:
        """results.csv, summary.csv and (when rho = 0.5 was run) snapshot.csv"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"results": out_dir / "results.csv", "summary": out_dir / "summary.csv"}
        result_repo.write_records(records, paths["results"])
        dataset_repo.write_csv(ExperimentService.summarize_decay(records), paths["summary"])

        snapshot = ExperimentService.summarize_at_rho(records)
        if len(snapshot):
            paths["snapshot"] = out_dir / "snapshot.csv"
            dataset_repo.write_csv(snapshot, paths["snapshot"])
        return paths


def scaled_name(name: str, scale: int) -> str:
    """Dataset label of an ensemble-scaling run: 'name' at 1x, 'name@3x' otherwise"""
    return name if scale == 1 else f"{name}@{scale}x"


def _fit_models(cfg: ExperimentConfig, train: MaskedMatrix, rng: SeededRng,
                scale: int = 1) -> Dict[Tuple[Algorithm, bool], object]:
    """
    One model per algorithm, plus the feature-bagged forest when reduced
    iforest is requested; `scale` multiplies every ensemble size (trees,
    projections, bootstrap fits per k)
    """
    models = {}
    for algorithm, strategies in cfg.algorithms.items():
        a = ALGORITHM_INDEX[algorithm]
        if algorithm == Algorithm.IFOREST:
            trees = cfg.iforest.trees * scale
            if any(s != Strategy.REDUCED for s in strategies):
                models[(algorithm, False)] = iforest_service.fit_iforest(
                    train, trees, cfg.iforest.subsample, reduced=False, rng=rng.fork(a, 0))
            if Strategy.REDUCED in strategies:
                models[(algorithm, True)] = iforest_service.fit_iforest(
                    train, trees, cfg.iforest.subsample, reduced=True, rng=rng.fork(a, 1))
        elif algorithm == Algorithm.LODA:
            models[(algorithm, False)] = loda_service.fit_loda(train, cfg.loda.projections * scale, rng=rng.fork(a, 0))
        else:
            models[(algorithm, False)] = egmm_service.fit_egmm(train, cfg.egmm.ks, cfg.egmm.reps * scale,
                                                               rng=rng.fork(a, 0))
    return models


def _score(algorithm: Algorithm, strategy: Strategy, models, damaged: MaskedMatrix, imputed) -> np.ndarray:
    if strategy in (Strategy.MEAN, Strategy.MICE, Strategy.SENTINEL):
        filled = imputed(strategy)
        if algorithm == Algorithm.IFOREST:
            return iforest_service.score_matrix(models[(algorithm, False)], filled, "baseline").scores
        if algorithm == Algorithm.LODA:
            return loda_service.score_matrix(models[(algorithm, False)], filled, "baseline").scores
        return egmm_service.score_matrix(models[(algorithm, False)], filled, "baseline").scores

    if strategy == Strategy.PROPORTIONAL:
        return iforest_service.score_matrix(models[(algorithm, False)], damaged, "proportional").scores
    if strategy == Strategy.REDUCED and algorithm == Algorithm.IFOREST:
        return iforest_service.score_matrix(models[(algorithm, True)], damaged, "reduced").scores
    if strategy == Strategy.REDUCED:
        return loda_service.score_matrix(models[(algorithm, False)], damaged, "reduced").scores
    return egmm_service.score_matrix(models[(algorithm, False)], damaged, "marginal", allow_fallback=True).scores


def _run_unit(cfg: ExperimentConfig, ds: int, rep: int, loaded: Optional[LabeledDataset],
              rng: SeededRng) -> List[EvalRecord]:
    entry = cfg.dataset[ds]
    name = entry.dataset_name
    if loaded is None:
        synth_cfg = synth_service.replicate_config(entry.synth_config(), rep)
        data = synth_service.generate(synth_cfg, rng.fork(_DATA))
    else:
        data = loaded

    train = data.features
    # scale 1 keeps the unscaled fork so plain runs reproduce
    fitted = {scale: _fit_models(cfg, train, rng.fork(_FIT) if scale == 1 else rng.fork(_FIT, scale), scale)
              for scale in cfg.grid.ensemble_scale}
    stats = impute_service.column_stats(train)

    records = []
    for r, rho in enumerate(cfg.grid.rho):
        damaged = synth_service.inject(train, rho, rng.fork(_INJECT, r), mode=cfg.grid.mode,
                                       feature_rate=cfg.grid.feature_rate, row_fraction=cfg.grid.row_fraction)
        cache: Dict[Strategy, MaskedMatrix] = {}

        def imputed(strategy: Strategy) -> MaskedMatrix:
            if strategy not in cache:
                if strategy == Strategy.MEAN:
                    cache[strategy] = impute_service.mean_impute_matrix(stats, damaged)
                elif strategy == Strategy.SENTINEL:
                    cache[strategy] = impute_service.sentinel_impute(damaged, cfg.sentinel_value)
                else:
                    cache[strategy] = impute_service.mice_impute(damaged, train, cfg.mice, rng.fork(_MICE, r))
            return cache[strategy]

        for scale, models in fitted.items():
            label = scaled_name(name, scale)
            for algorithm, strategies in sorted(cfg.algorithms.items(), key=lambda kv: ALGORITHM_INDEX[kv[0]]):
                for strategy in sorted(strategies, key=STRATEGY_INDEX.get):
                    path = (_CELL, r, ALGORITHM_INDEX[algorithm], STRATEGY_INDEX[strategy])
                    cell = rng.fork(*path) if scale == 1 else rng.fork(*path, scale)
                    scores = _score(algorithm, strategy, models, damaged, imputed)
                    records.append(EvalRecord(
                        dataset=label,
                        algorithm=algorithm,
                        strategy=strategy,
                        rho=rho,
                        replicate=rep,
                        seed=cell.seed_value(),
                        auc=ExperimentService.auc(scores, data.labels),
                    ))
        logger.info(f"[{name} rep {rep}] rho={rho}: "
                    f"{', '.join(f'{rec.dataset}:{rec.algorithm.value}/{rec.strategy.value}={rec.auc:.4f}' for rec in records if rec.rho == rho)}")
    return records


experiment_service = ExperimentService()

auc = experiment_service.auc
relative_auc = experiment_service.relative_auc
summarize_decay = experiment_service.summarize_decay
summarize_at_rho = experiment_service.summarize_at_rho
run_experiment = experiment_service.run_experiment
