from collections import defaultdict

import numpy as np
import pandas as pd
import pytest

from gapscore.config import ExperimentConfig, build
from gapscore.data.models import EvalRecord, LabeledDataset, MaskedMatrix
from gapscore.data.repository import write_csv
from gapscore.services.experiment_service import (
    SUMMARY_COLUMNS,
    auc,
    experiment_service,
    relative_auc,
    run_experiment,
    summarize_at_rho,
    summarize_decay,
)
from gapscore.utils.errors import ConfigurationError, FormatError, MissingBaselineError, UndefinedAucError


def _pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def _record(auc_value, rho=0.0, replicate=0, strategy="mean", algorithm="iforest", dataset="syn"):
    return EvalRecord(dataset, algorithm, strategy, rho, replicate, 1, auc_value)


def small_config(**overrides):
    data = {
        "dataset": [{"synthetic": "uncorrelated", "n": 200}],
        "algorithms": {
            "iforest": ["mean", "mice", "proportional", "reduced"],
            "loda": ["mean", "mice", "reduced"],
            "egmm": ["mean", "mice", "marginal"],
        },
        "grid": {"rho": [0.0, 0.5], "replicates": 2},
        "seed": {"master": 11},
        "iforest": {"trees": 20, "subsample": 64},
        "loda": {"projections": 20},
        "egmm": {"ks": [2], "reps": 2},
        "mice": {"passes": 6, "burn_in": 2},
    }
    data.update(overrides)
    return build(ExperimentConfig, data)


def test_auc_examples():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 0]) == 0.5
    assert auc([0.7, 0.4, 0.6, 0.4], [1, 0, 1, 0]) == 1.0
    assert auc([0.7, 0.4, 0.4, 0.6], [1, 0, 1, 0]) == pytest.approx(0.625, abs=1e-15)


def test_auc_matches_pair_enumeration(common_seed):
    gen = np.random.default_rng(common_seed)
    for _ in range(200):
        n = int(gen.integers(2, 51))
        labels = gen.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = np.round(gen.uniform(0, 1, n), 1)
        assert abs(auc(scores, labels) - _pairwise_auc(scores, labels)) < 1e-12


def test_auc_complement_and_monotone_transform(common_seed):
    gen = np.random.default_rng(common_seed)
    scores = np.round(gen.standard_normal(40), 1)
    labels = np.r_[np.ones(15, dtype=int), np.zeros(25, dtype=int)]
    assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0, abs=1e-12)
    assert auc(np.exp(3 * scores), labels) == auc(scores, labels)


def test_auc_errors():
    with pytest.raises(UndefinedAucError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(FormatError):
        auc([0.1, 0.2, 0.3], [1, 0])


def test_relative_auc_divides_by_rho_zero():
    records = [_record(0.9), _record(0.72, rho=0.4)]
    table = relative_auc(records).set_index("rho")
    assert table.loc[0.0, "mean_rel_auc"] == 1.0
    assert table.loc[0.4, "mean_rel_auc"] == pytest.approx(0.8, abs=1e-12)


def test_relative_auc_averages_replicates():
    records = [
        _record(1.0, replicate=0), _record(0.8, rho=0.5, replicate=0),
        _record(0.8, replicate=1), _record(0.72, rho=0.5, replicate=1),
    ]
    row = relative_auc(records).query("rho == 0.5").iloc[0]
    assert row["mean_rel_auc"] == pytest.approx(0.85, abs=1e-12)
    assert row["n"] == 2


def test_reduced_is_measured_against_the_full_detector():
    records = [
        _record(0.9, strategy="mean"), _record(0.6, strategy="reduced"),
        _record(0.6, rho=0.5, strategy="reduced"),
    ]
    rel = relative_auc(records).set_index(["strategy", "rho"])["mean_rel_auc"]
    assert rel.loc[("reduced", 0.5)] == pytest.approx(0.6 / 0.9, abs=1e-12)
    assert rel.loc[("reduced", 0.0)] == pytest.approx(0.6 / 0.9, abs=1e-12)
    assert rel.loc[("mean", 0.0)] == 1.0


def test_every_strategy_shares_the_group_baseline():
    records = [
        _record(0.9, strategy="mean"), _record(0.8, strategy="proportional"),
        _record(0.6, rho=0.3, strategy="proportional"),
        _record(0.45, rho=0.3, strategy="mice"),
    ]
    table = experiment_service.relative_table(records)
    assert set(table["baseline_auc"]) == {0.9}
    rel = table.set_index(["strategy", "rho"])["rel_auc"]
    assert rel.loc[("proportional", 0.3)] == pytest.approx(0.6 / 0.9, abs=1e-12)
    assert rel.loc[("mice", 0.3)] == pytest.approx(0.5, abs=1e-12)


def test_reduced_alone_is_its_own_baseline():
    records = [_record(0.8, strategy="reduced"), _record(0.4, rho=0.7, strategy="reduced")]
    rel = relative_auc(records).set_index("rho")["mean_rel_auc"]
    assert rel.loc[0.7] == pytest.approx(0.5, abs=1e-12)


def test_missing_baseline_names_the_group():
    with pytest.raises(MissingBaselineError, match="replicate 3"):
        relative_auc([_record(0.7, rho=0.2, replicate=3)])


def test_summarize_decay_matches_hand_aggregation(common_seed):
    gen = np.random.default_rng(common_seed)
    records = []
    for dataset in ("a", "b"):
        for rep in range(5):
            for strategy in ("mean", "proportional"):
                for rho in (0.0, 0.2, 0.4):
                    records.append(_record(float(gen.uniform(0.5, 1.0)), rho, rep, strategy, dataset=dataset))

    baseline = {(r.dataset, r.replicate): r.auc for r in records if r.rho == 0.0 and r.strategy.value == "mean"}
    groups = defaultdict(list)
    for r in records:
        groups[(r.strategy.value, r.rho)].append(r.auc / baseline[(r.dataset, r.replicate)])

    summary = summarize_decay(records)
    assert list(summary.columns) == SUMMARY_COLUMNS
    assert len(summary) == 6
    for row in summary.itertuples(index=False):
        values = groups[(row.strategy, row.rho)]
        mean = sum(values) / len(values)
        sd = float(np.std(values, ddof=1))
        assert abs(row.mean_rel_auc - mean) < 1e-12
        assert row.ci_hi - row.ci_lo == pytest.approx(2 * 1.96 * sd / np.sqrt(len(values)), abs=1e-12)


def test_summarize_decay_single_record():
    summary = summarize_decay([_record(0.8)])
    row = summary.iloc[0]
    assert row["mean_rel_auc"] == 1.0
    assert row["ci_lo"] == row["ci_hi"] == 1.0


def test_summarize_decay_needs_records():
    with pytest.raises(ConfigurationError):
        summarize_decay([])


def test_summarize_at_rho_is_one_row_per_dataset():
    records = []
    for dataset, mice_rel in (("x", 0.9), ("y", 0.6)):
        for strategy in ("mean", "mice"):
            records.append(_record(1.0, 0.0, 0, strategy, dataset=dataset))
        records.append(_record(0.7, 0.5, 0, "mean", dataset=dataset))
        records.append(_record(mice_rel, 0.5, 0, "mice", dataset=dataset))
    wide = summarize_at_rho(records, 0.5)
    assert wide["dataset"].tolist() == ["y", "x"]
    assert wide["iforest_mice"].tolist() == pytest.approx([0.6, 0.9])
    assert wide["iforest_mean"].tolist() == pytest.approx([0.7, 0.7])


def test_experiment_records_cover_the_grid():
    cfg = small_config()
    records = run_experiment(cfg)
    assert len(records) == 1 * 2 * 2 * 10
    keys = [r.key for r in records]
    assert keys == sorted(keys)
    assert len(set(keys)) == len(keys)
    assert all(0.0 <= r.auc <= 1.0 for r in records)


def test_experiment_strategies_agree_without_missing_values():
    records = run_experiment(small_config())
    by_cell = defaultdict(dict)
    for r in records:
        if r.rho == 0.0:
            by_cell[(r.algorithm.value, r.replicate)][r.strategy.value] = r.auc
    for (algorithm, _), aucs in by_cell.items():
        if algorithm == "iforest":
            assert aucs["mean"] == aucs["mice"] == aucs["proportional"]
        elif algorithm == "loda":
            assert aucs["mean"] == aucs["mice"] == aucs["reduced"]
        else:
            assert aucs["mean"] == aucs["mice"] == aucs["marginal"]


def test_experiment_is_deterministic():
    a = [r.to_dict() for r in run_experiment(small_config(jobs=2))]
    b = [r.to_dict() for r in run_experiment(small_config(jobs=1))]
    assert a == b


def test_experiment_reads_labeled_csv(tmp_path, common_seed):
    gen = np.random.default_rng(common_seed)
    X = np.vstack((gen.standard_normal((90, 3)), 4.0 + gen.standard_normal((10, 3))))
    path = tmp_path / "blobs.csv"
    write_csv(LabeledDataset(MaskedMatrix.from_array(X), labels=np.r_[np.zeros(90), np.ones(10)]), path)

    cfg = small_config(dataset=[{"csv": str(path)}], algorithms={"iforest": ["proportional"]})
    records = run_experiment(cfg)
    assert {r.dataset for r in records} == {"blobs"}
    assert len(records) == 2 * 2
    assert min(r.auc for r in records if r.rho == 0.0) > 0.9


def test_experiment_rejects_bad_configs():
    with pytest.raises(ConfigurationError):
        small_config(algorithms={"loda": ["proportional"]})
    with pytest.raises(ConfigurationError):
        small_config(grid={"rho": [0.2, 0.4]})
    with pytest.raises(ConfigurationError):
        run_experiment(small_config(seed={}))
    with pytest.raises(ConfigurationError):
        run_experiment(small_config(dataset=[{"synthetic": "noise"}, {"synthetic": "noise"}]))


def test_write_outputs(tmp_path):
    records = run_experiment(small_config(algorithms={"iforest": ["mean", "reduced"]}))
    paths = experiment_service.write_outputs(records, tmp_path / "out")
    results = pd.read_csv(paths["results"])
    assert list(results.columns) == ["dataset", "algorithm", "strategy", "rho", "replicate", "seed", "auc"]
    assert len(results) == len(records)
    assert list(pd.read_csv(paths["summary"]).columns) == SUMMARY_COLUMNS
    assert "snapshot" in paths


def test_sentinel_equals_baseline_without_missing_values():
    cfg = small_config(algorithms={"iforest": ["mean", "sentinel"], "loda": ["mean", "sentinel"]})
    by_cell = defaultdict(dict)
    for r in run_experiment(cfg):
        by_cell[(r.algorithm.value, r.rho, r.replicate)][r.strategy.value] = r.auc
    for (_, rho, _), aucs in by_cell.items():
        if rho == 0.0:
            assert aucs["sentinel"] == aucs["mean"]
        assert 0.0 <= aucs["sentinel"] <= 1.0


def test_sentinel_value_is_configurable():
    assert small_config().sentinel_value == -9999.0
    assert small_config(sentinel_value=-999.0).sentinel_value == -999.0


@pytest.mark.parametrize("mode", ["instances", "features"])
def test_injection_mode_only_changes_damaged_cells(mode):
    algorithms = {"iforest": ["mean", "proportional"]}
    mcar = run_experiment(small_config(algorithms=algorithms))
    other = run_experiment(small_config(algorithms=algorithms,
                                        grid={"rho": [0.0, 0.5], "replicates": 2, "mode": mode}))
    assert [r.key for r in other] == [r.key for r in mcar]
    for a, b in zip(mcar, other):
        if a.rho == 0.0:
            assert a.auc == b.auc


def test_ensemble_scale_adds_labelled_runs():
    algorithms = {"iforest": ["mean"], "loda": ["reduced"]}
    plain = run_experiment(small_config(algorithms=algorithms))
    scaled = run_experiment(small_config(algorithms=algorithms,
                                         grid={"rho": [0.0, 0.5], "replicates": 2, "ensemble_scale": [1, 3]}))
    assert {r.dataset for r in scaled} == {"uncorrelated", "uncorrelated@3x"}
    unscaled = [r.to_dict() for r in scaled if r.dataset == "uncorrelated"]
    assert unscaled == [r.to_dict() for r in plain]
    assert len(scaled) == 2 * len(plain)
    assert set(relative_auc(scaled)["dataset"]) == {"uncorrelated", "uncorrelated@3x"}


def test_grid_rejects_bad_modes_and_scales():
    with pytest.raises(ConfigurationError):
        small_config(grid={"rho": [0.0], "mode": "rows"})
    with pytest.raises(ConfigurationError):
        small_config(grid={"rho": [0.0], "ensemble_scale": [0]})
    with pytest.raises(ConfigurationError):
        small_config(grid={"rho": [0.0], "ensemble_scale": [2, 2]})
    with pytest.raises(ConfigurationError):
        small_config(grid={"rho": [0.0], "row_fraction": 0.0})
