import numpy as np
import pytest

from gapscore.data.models import Algorithm, EvalRecord, LabeledDataset, MaskedMatrix, Strategy, reduced_quorum
from gapscore.data.repository import ResultRepository, load_csv, write_csv
from gapscore.data.rng import SeededRng, rng_fork
from gapscore.utils.errors import ConfigurationError, FormatError, ParseError


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_marks_na_cells(tmp_path):
    ds = load_csv(_write(tmp_path, "a,b\n1.0,NA\n2.0,3.0\n"))
    m = ds.features
    assert m.shape == (2, 2)
    assert m.columns == ("a", "b")
    assert not m.mask[0, 1]
    assert m.mask[0, 0] and m.mask[1].all()
    assert m.values[1, 1] == 3.0
    assert ds.labels is None


def test_load_csv_splits_off_label_column(tmp_path):
    ds = load_csv(_write(tmp_path, "a,label\n5,1\n6,0\n"), label_column="label")
    assert ds.features.shape == (2, 1)
    assert ds.features.columns == ("a",)
    assert list(ds.labels) == [1, 0]
    assert ds.n_anomalies == 1


def test_load_csv_reports_malformed_number(tmp_path):
    with pytest.raises(ParseError) as info:
        load_csv(_write(tmp_path, "a\nxyz\n"))
    assert info.value.row == 1
    assert info.value.column == "a"


def test_load_csv_missing_label_column(tmp_path):
    with pytest.raises(ConfigurationError):
        load_csv(_write(tmp_path, "a,b\n1,2\n"), label_column="label")


def test_load_csv_rejects_non_binary_label(tmp_path):
    with pytest.raises(ParseError):
        load_csv(_write(tmp_path, "a,label\n1,2\n"), label_column="label")


@pytest.mark.parametrize("text", ["a,b\n1,2\n3,4,5\n", "a,b\n1,2\n3\n", "a,b\n1,2,3\n"])
def test_load_csv_rejects_ragged_rows(tmp_path, text):
    with pytest.raises(FormatError):
        load_csv(_write(tmp_path, text))


def test_load_csv_rejects_empty_file(tmp_path):
    with pytest.raises(FormatError):
        load_csv(_write(tmp_path, ""))


def test_sentinel_is_only_mapped_when_asked(tmp_path):
    path = _write(tmp_path, "a,b\n-999,1\n2,-999\n")
    plain = load_csv(path)
    assert plain.features.is_complete()

    mapped = load_csv(path, sentinel=-999.0)
    assert mapped.features.mask.tolist() == [[False, True], [True, False]]


def test_write_csv_single_cell(tmp_path):
    path = tmp_path / "out.csv"
    write_csv({"x": [1.0]}, path)
    assert path.read_text(encoding="utf-8").startswith("x\n1.0")


def test_write_csv_emits_na_token(tmp_path):
    path = tmp_path / "out.csv"
    write_csv(MaskedMatrix.from_array([[1.5, np.nan]], columns=["p", "q"]), path)
    assert path.read_text(encoding="utf-8").splitlines() == ["p,q", "1.5,NA"]


def test_write_csv_rejects_unequal_columns(tmp_path):
    with pytest.raises(FormatError):
        write_csv({"x": [1.0, 2.0], "y": [1.0]}, tmp_path / "out.csv")


def test_csv_round_trip_keeps_values_and_mask(tmp_path, common_seed):
    gen = np.random.default_rng(common_seed)
    X = gen.standard_normal((40, 5)) * 1e3
    X[gen.random(X.shape) < 0.3] = np.nan
    original = MaskedMatrix.from_array(X, columns=[f"f{j}" for j in range(5)])

    path = tmp_path / "rt.csv"
    write_csv(original, path)
    loaded = load_csv(path).features

    assert loaded.equals(original)
    assert loaded.columns == original.columns


def test_labeled_round_trip(tmp_path):
    ds = LabeledDataset(MaskedMatrix.from_array([[1.0, 2.0], [np.nan, 4.0]]), labels=[0, 1])
    path = tmp_path / "ds.csv"
    write_csv(ds, path)
    back = load_csv(path, label_column="label")
    assert back.features.equals(ds.features)
    assert list(back.labels) == [0, 1]


def test_masked_matrix_shape_checks():
    with pytest.raises(FormatError):
        MaskedMatrix(np.zeros((2, 2)), np.ones((2, 3), dtype=bool))
    with pytest.raises(FormatError):
        MaskedMatrix(np.zeros((2, 0)), np.ones((2, 0), dtype=bool))
    empty = MaskedMatrix(np.zeros((0, 3)), np.ones((0, 3), dtype=bool))
    assert empty.n_rows == 0


def test_masked_matrix_is_read_only():
    m = MaskedMatrix.from_array([[1.0, 2.0]])
    with pytest.raises(ValueError):
        m.values[0, 0] = 5.0


def test_equals_ignores_payload_of_missing_cells():
    mask = np.array([[True, False]])
    a = MaskedMatrix(np.array([[1.0, 7.0]]), mask)
    b = MaskedMatrix(np.array([[1.0, -3.0]]), mask)
    assert a.equals(b)


def test_labels_must_match_rows():
    with pytest.raises(FormatError):
        LabeledDataset(MaskedMatrix.from_array([[1.0], [2.0]]), labels=[1])


def test_fork_is_deterministic():
    a = rng_fork(SeededRng(7), (0,)).generator.random(100)
    b = rng_fork(SeededRng(7), (0,)).generator.random(100)
    assert np.array_equal(a, b)


def test_fork_labels_give_different_streams():
    a = rng_fork(SeededRng(7), (0,)).generator.random(100)
    b = rng_fork(SeededRng(7), (1,)).generator.random(100)
    assert not np.array_equal(a, b)


def test_fork_seeds_give_different_streams():
    a = rng_fork(SeededRng(8), (0,)).generator.random(100)
    b = rng_fork(SeededRng(7), (0,)).generator.random(100)
    assert not np.array_equal(a, b)


def test_fork_ignores_parent_draws():
    parent = SeededRng(7)
    before = parent.fork(3).generator.random(10)
    parent.generator.random(1000)
    after = parent.fork(3).generator.random(10)
    assert np.array_equal(before, after)


def test_seed_out_of_range():
    with pytest.raises(ConfigurationError):
        SeededRng(-1)
    with pytest.raises(ConfigurationError):
        SeededRng(2**64)


def test_eval_record_rejects_unsupported_pair():
    with pytest.raises(ConfigurationError):
        EvalRecord("d", "loda", "proportional", 0.1, 0, 1, 0.9)
    record = EvalRecord("d", "egmm", "marginal", 0.1, 0, 1, 0.9)
    assert record.algorithm is Algorithm.EGMM
    assert record.strategy is Strategy.MARGINAL


def test_records_round_trip(tmp_path):
    records = [
        EvalRecord("syn", Algorithm.IFOREST, Strategy.PROPORTIONAL, 0.3, 2, 2**63 + 5, 0.8125),
        EvalRecord("syn", Algorithm.LODA, Strategy.MEAN, 0.0, 0, 11, 1.0),
    ]
    path = tmp_path / "results.csv"
    ResultRepository.write_records(records, path)
    back = ResultRepository.read_records(path)
    assert [r.to_dict() for r in back] == [r.to_dict() for r in records]


def test_reduced_quorum_is_five_percent_of_the_ensemble():
    assert reduced_quorum(100) == 5
    assert reduced_quorum(40) == 2
    assert reduced_quorum(20) == 1
    assert reduced_quorum(1) == 1
    assert reduced_quorum(100, fraction=0.0) == 1
