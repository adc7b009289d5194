import math

import numpy as np
import pandas as pd
import pytest

from src.components.datasets import (
    CsvSchema,
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    split,
    synthetic_streams,
    true_log_risk,
    write_csv,
)
from src.components.errors import ConfigurationError, DataError


def write_rows(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# Synthetic generators


def test_linear_ground_truth():
    ds = generate_synthetic(SyntheticConfig(kind="linear", n=500, seed=3))
    assert np.array_equal(ds.ground_truth, ds.raw_X[:, 0] + 2.0 * ds.raw_X[:, 1])
    assert np.all(np.abs(ds.ground_truth) <= 3.0)
    assert np.all((ds.raw_X >= -1.0) & (ds.raw_X <= 1.0))
    assert ds.feature_names == ("x1", "x2")


def test_nonlinear_ground_truth_values():
    cfg = SyntheticConfig(kind="nonlinear")
    corners = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
    values = true_log_risk(cfg, corners)
    assert values[0] == pytest.approx(math.log(5.0))
    assert values[1:] == pytest.approx([math.log(5.0) * math.exp(-0.25)] * 4)
    assert values[1] == pytest.approx(1.2533, abs=1e-3)


def test_censor_rate_and_baseline_mean():
    cfg = SyntheticConfig(kind="nonlinear", n=10000, seed=123)
    ds = generate_synthetic(cfg)
    assert abs((1.0 - ds.event.mean()) - 0.10) <= 0.001
    _, baseline = synthetic_streams(cfg.seed)
    assert 4.8 <= baseline.exponential(cfg.mean_t0, cfg.n).mean() <= 5.2


def test_cap_consistency():
    ds = generate_synthetic(SyntheticConfig(n=1000, seed=4))
    cap = ds.time.max()
    assert np.all(ds.time[~ds.event] == cap)
    assert np.all(ds.time[ds.event] < cap)


def test_uncensored_times_recover_baseline_draws():
    cfg = SyntheticConfig(kind="nonlinear", n=800, seed=9)
    ds = generate_synthetic(cfg)
    _, baseline = synthetic_streams(cfg.seed)
    t0 = baseline.exponential(cfg.mean_t0, cfg.n)
    recovered = ds.time * np.exp(ds.ground_truth)
    assert np.allclose(recovered[ds.event], t0[ds.event], rtol=1e-12, atol=0)


def test_generator_is_deterministic():
    a = generate_synthetic(SyntheticConfig(n=300, seed=17))
    b = generate_synthetic(SyntheticConfig(n=300, seed=17))
    c = generate_synthetic(SyntheticConfig(n=300, seed=18))
    assert a.raw_X.tobytes() == b.raw_X.tobytes()
    assert a.time.tobytes() == b.time.tobytes()
    assert not np.array_equal(a.time, c.time)


def test_no_censoring_when_fraction_is_zero():
    ds = generate_synthetic(SyntheticConfig(n=200, censor_fraction=0.0))
    assert ds.event.all()


@pytest.mark.parametrize(
    "overrides",
    [{"kind": "cubic"}, {"n": 0}, {"lam": -1.0}, {"censor_fraction": 1.0}, {"seed": -1}],
)
def test_invalid_synthetic_config(overrides):
    with pytest.raises(ConfigurationError):
        SyntheticConfig(**overrides)


# Tabular ingestion


def test_categorical_columns_drop_reference_level(tmp_path):
    path = write_rows(tmp_path / "cat.csv", "time,event,grade\n1.5,1,b\n2.0,0,a\n3.0,1,c\n")
    ds = load_csv(path, CsvSchema(categorical_cols=("grade",)))
    assert ds.feature_names == ("grade_b", "grade_c")
    assert ds.X.tolist() == [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]
    assert np.all(ds.X.sum(axis=1) <= 1)


def test_binary_columns_are_kept_and_numeric_columns_standardized(tmp_path):
    path = write_rows(tmp_path / "mixed.csv", "time,event,sex,age\n1,1,0,50\n2,1,1,60\n3,0,1,70\n")
    ds = load_csv(path)
    assert ds.feature_names == ("sex", "age")
    assert ds.X[:, 0].tolist() == [0.0, 1.0, 1.0]
    assert ds.X[:, 1].mean() == pytest.approx(0.0, abs=1e-12)
    assert ds.X[:, 1].std() == pytest.approx(1.0)
    assert [c.kind for c in ds.encoding.columns] == ["binary", "numeric"]


def test_constant_column_is_rejected(tmp_path):
    path = write_rows(tmp_path / "const.csv", "time,event,dose\n1,1,4\n2,0,4\n3,1,4\n")
    with pytest.raises(DataError, match="dose"):
        load_csv(path)


def test_synthetic_round_trip_through_csv(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n=200, seed=21))
    loaded = load_csv(write_csv(ds, tmp_path / "data.csv"))
    assert loaded.feature_names == ds.feature_names
    assert np.allclose(loaded.raw_X, ds.raw_X, atol=1e-9)
    means = np.array([m for m, _ in loaded.standardization])
    sds = np.array([s for _, s in loaded.standardization])
    assert np.allclose(loaded.X * sds + means, ds.raw_X, atol=1e-9)
    assert np.array_equal(loaded.time, ds.time)
    assert np.array_equal(loaded.event, ds.event)
    assert np.allclose(loaded.ground_truth, ds.ground_truth, atol=1e-12)


def test_full_precision_values_parse_exactly(tmp_path):
    values = np.random.default_rng(11).uniform(0.01, 50.0, 500)
    lines = ["time,event,age"] + [f"{v:.17g},1,{-v:.17g}" for v in values]
    ds = load_csv(write_rows(tmp_path / "precise.csv", "\n".join(lines) + "\n"), CsvSchema(standardize=False))
    assert ds.time.tobytes() == values.tobytes()
    assert ds.raw_X[:, 0].tobytes() == (-values).tobytes()


def test_unstandardized_schema_survives_split(tmp_path):
    path = write_rows(tmp_path / "raw.csv", "time,event,age\n1,1,30\n2,0,40\n3,1,50\n4,1,35\n5,1,45\n")
    ds = load_csv(path, CsvSchema(standardize=False))
    assert ds.standardization == ((0.0, 1.0),)
    assert not ds.encoding.standardize
    train, test = split(ds, 0.4, seed=1)
    assert train.standardization == ((0.0, 1.0),)
    assert test.standardization == ((0.0, 1.0),)
    assert np.array_equal(train.X, train.raw_X)
    assert train.encoding.columns[0].sd == 1.0


def test_excel_files_are_read_from_first_sheet(tmp_path):
    frame = pd.DataFrame({"time": [1.0, 2.0, 3.0], "event": [1, 0, 1], "age": [40.0, 55.0, 61.0]})
    path = tmp_path / "data.xlsx"
    frame.to_excel(path, index=False)
    ds = load_csv(path)
    assert ds.feature_names == ("age",)
    assert ds.time.tolist() == [1.0, 2.0, 3.0]
    assert ds.event.tolist() == [True, False, True]


def test_event_column_accepts_boolean_words(tmp_path):
    path = write_rows(tmp_path / "words.csv", "time,event,age\n1,true,3\n2,False,4\n3,1,5\n")
    assert load_csv(path).event.tolist() == [True, False, True]


def test_custom_column_roles_from_schema_file(tmp_path):
    schema_path = write_rows(
        tmp_path / "schema.json", '{"time_col": "days", "event_col": "died", "feature_cols": ["age"]}'
    )
    path = write_rows(tmp_path / "custom.csv", "days,died,age,ignored\n5,1,30,x\n7,0,40,y\n9,1,50,z\n")
    ds = load_csv(path, CsvSchema.from_json(schema_path))
    assert ds.feature_names == ("age",)
    assert ds.time.tolist() == [5.0, 7.0, 9.0]


def test_schema_file_with_unknown_keys(tmp_path):
    schema_path = write_rows(tmp_path / "schema.json", '{"time_col": "t", "weights": "w"}')
    with pytest.raises(ConfigurationError, match="weights"):
        CsvSchema.from_json(schema_path)


def test_missing_column(tmp_path):
    path = write_rows(tmp_path / "nocol.csv", "time,status,age\n1,1,3\n2,0,4\n")
    with pytest.raises(DataError, match="'event'"):
        load_csv(path)


def test_unparseable_cell_reports_row_and_column(tmp_path):
    path = write_rows(tmp_path / "bad.csv", "time,event,age\n1,1,30\n2,0,abc\n3,1,50\n")
    with pytest.raises(DataError, match="Row 2, column 'age'"):
        load_csv(path)


def test_non_positive_time(tmp_path):
    path = write_rows(tmp_path / "zero.csv", "time,event,age\n1,1,30\n0,0,40\n3,1,50\n")
    with pytest.raises(DataError, match="Row 2"):
        load_csv(path)


def test_unknown_category_at_predict_time(tmp_path):
    train_path = write_rows(tmp_path / "train.csv", "time,event,grade\n1,1,a\n2,0,b\n3,1,a\n")
    test_path = write_rows(tmp_path / "test.csv", "time,event,grade\n1,1,a\n2,1,c\n")
    schema = CsvSchema(categorical_cols=("grade",))
    train = load_csv(train_path, schema)
    with pytest.raises(DataError, match="unknown category"):
        load_csv(test_path, schema, encoding=train.encoding)


def test_test_file_reuses_training_statistics(tmp_path):
    train_path = write_rows(tmp_path / "train.csv", "time,event,age\n1,1,10\n2,0,20\n3,1,30\n")
    test_path = write_rows(tmp_path / "test.csv", "time,event,age\n4,1,20\n")
    train = load_csv(train_path)
    test = load_csv(test_path, encoding=train.encoding)
    assert test.standardization == train.standardization
    assert test.X[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_dataset_rejects_mismatched_lengths():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.ones(2), np.ones(3), ("a", "b"))


# Splits


def test_split_sizes_and_train_statistics():
    ds = generate_synthetic(SyntheticConfig(n=100, seed=2))
    train, test = split(ds, 0.2, seed=5)
    assert (train.num_records, test.num_records) == (80, 20)
    assert np.allclose(train.X.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(train.X.std(axis=0), 1.0)
    assert test.standardization == train.standardization


def test_split_is_seeded():
    ds = generate_synthetic(SyntheticConfig(n=100, seed=2))
    first, _ = split(ds, 0.2, seed=5)
    again, _ = split(ds, 0.2, seed=5)
    other, _ = split(ds, 0.2, seed=6)
    assert np.array_equal(first.time, again.time)
    assert not np.array_equal(first.time, other.time)


def test_split_rejects_training_part_without_events():
    ds = Dataset(np.arange(20.0).reshape(10, 2), np.arange(1.0, 11.0), np.zeros(10), ("a", "b"))
    with pytest.raises(DataError, match="no events"):
        split(ds, 0.2, seed=0)


def test_split_rejects_empty_parts():
    ds = generate_synthetic(SyntheticConfig(n=3, seed=0, censor_fraction=0.0))
    with pytest.raises(DataError):
        split(ds, 0.1, seed=0)
    with pytest.raises(ConfigurationError):
        split(ds, 1.0, seed=0)
