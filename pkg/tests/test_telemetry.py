import json
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinforge.exceptions import NormalizationError, SchemaError, ValidationError
from twinforge.telemetry import (
    CSV_COLUMNS,
    FEATURES,
    READINGS_PER_CYCLE,
    Cycle,
    DatasetSplit,
    IngestWarning,
    PatternScaler,
    RawPattern,
    generate_synthetic,
    ingest_csv,
    normalize_and_split,
    read_patterns,
    window_cycles,
    write_csv,
)


def test_reference_generation_shape():
    cycles = generate_synthetic(4, 132, seed=7)
    assert len(cycles) == 528
    assert all(len(c) == READINGS_PER_CYCLE for c in cycles)
    assert sorted({c.dt_id for c in cycles}) == [0, 1, 2, 3]


def test_generation_is_deterministic():
    a = generate_synthetic(2, 1, seed=0)
    b = generate_synthetic(2, 1, seed=0)
    for x, y in zip(a, b):
        assert x.readings.tobytes() == y.readings.tobytes()


def test_different_seeds_differ():
    a = generate_synthetic(2, 1, seed=0)[0].readings
    b = generate_synthetic(2, 1, seed=1)[0].readings
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("dts,cycles", [(1, 5), (0, 5), (3, 0)])
def test_generation_rejects_bad_counts(dts, cycles):
    with pytest.raises(ValidationError):
        generate_synthetic(dts, cycles, seed=0)


def test_temperature_trajectories_separate_by_three_sigma():
    cycles = generate_synthetic(4, 10, seed=1)
    temp = FEATURES.index("temperature_measured") + 1
    # brute force: per-dt mean trajectory and per-dt pooled within-dt std
    by_dt = {}
    for c in cycles:
        by_dt.setdefault(c.dt_id, []).append([r[temp] for r in c.readings])
    means, sigmas = {}, {}
    for dt, rows in by_dt.items():
        n = len(rows)
        mean = [sum(r[i] for r in rows) / n for i in range(READINGS_PER_CYCLE)]
        var = sum((r[i] - mean[i]) ** 2 for r in rows for i in range(READINGS_PER_CYCLE))
        means[dt] = mean
        sigmas[dt] = (var / (n * READINGS_PER_CYCLE - 1)) ** 0.5
    dts = sorted(means)
    for i in dts:
        for j in dts:
            if i < j:
                gap = sum(abs(a - b) for a, b in zip(means[i], means[j])) / READINGS_PER_CYCLE
                assert gap > 3 * max(sigmas[i], sigmas[j]), (i, j, gap)


def test_cycle_validates_monotone_timestamps():
    cyc = generate_synthetic(2, 1, seed=0)[0]
    bad = cyc.readings.copy()
    bad[10, 0] = bad[9, 0]
    with pytest.raises(ValidationError):
        Cycle(0, 0, bad)


def test_window_partition_reconstructs_cycle():
    cyc = generate_synthetic(2, 1, seed=3)[0]
    windows = window_cycles([cyc])
    assert len(windows) == 5
    assert np.array_equal(np.concatenate([w.values for w in windows]), cyc.features)
    assert np.array_equal(np.concatenate([w.timestamps for w in windows]), cyc.timestamps)
    for w in windows:
        assert w.timestamps[0] < w.timestamps[33]


def test_reference_window_count():
    windows = window_cycles(generate_synthetic(4, 132, seed=7))
    assert len(windows) == 2640


def test_reference_split_counts(reference_split):
    s = reference_split
    assert len(s.train_X) == 2112 and len(s.test_X) == 528
    assert np.bincount(s.test_y).tolist() == [132] * 4
    assert s.train_X.shape[1:] == (34, 5)
    assert s.train_X.min() >= 0.0 and s.train_X.max() <= 1.0
    assert s.test_X.min() >= 0.0 and s.test_X.max() <= 1.0


def test_split_is_disjoint_and_complete():
    cycles = generate_synthetic(3, 6, seed=2)
    raw = window_cycles(cycles)
    split = normalize_and_split(raw, 0.7, seed=2)
    train = split.scaler.inverse_transform(split.train_X)
    test = split.scaler.inverse_transform(split.test_X)
    keys = lambda arr: {np.round(a, 6).tobytes() for a in arr}
    assert not keys(train) & keys(test)
    assert len(train) + len(test) == len(raw)


def test_stats_come_from_train_only():
    split = normalize_and_split(window_cycles(generate_synthetic(3, 6, seed=4)), 0.8, seed=4)
    raw_train = split.scaler.inverse_transform(split.train_X).reshape(-1, 5)
    assert np.allclose(raw_train.min(axis=0), split.scaler.data_min_)
    assert np.allclose(raw_train.max(axis=0), split.scaler.data_max_)
    flat = split.train_X.reshape(-1, 5)
    assert np.all(flat.min(axis=0) == 0.0) and np.all(flat.max(axis=0) == 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.1, 0.9))
def test_stratification_within_one_sample(seed, frac):
    raw = [RawPattern(dt, 0, 0, np.arange(34.0), np.random.default_rng(i).random((34, 5)))
           for i, dt in enumerate([0] * 17 + [1] * 11 + [2] * 23)]
    split = normalize_and_split(raw, frac, seed)
    for cls, n in ((0, 17), (1, 11), (2, 23)):
        assert abs(int(np.sum(split.train_y == cls)) - frac * n) <= 1.0


def test_split_determinism():
    raw = window_cycles(generate_synthetic(2, 4, seed=9))
    a = normalize_and_split(raw, 0.8, seed=3)
    b = normalize_and_split(raw, 0.8, seed=3)
    assert a.train_X.tobytes() == b.train_X.tobytes()
    assert a.test_y.tobytes() == b.test_y.tobytes()


def test_normalization_round_trip(small_split):
    s = small_split
    raw = s.scaler.inverse_transform(s.train_X)
    assert np.max(np.abs(s.scaler.transform(raw) - s.train_X)) < 1e-9
    assert np.max(np.abs(s.scaler.inverse_transform(s.scaler.transform(raw)) - raw)) < 1e-9


def test_zero_range_feature_is_named():
    X = np.random.default_rng(0).random((4, 34, 5))
    X[..., 2] = 7.0
    with pytest.raises(NormalizationError, match="temperature_measured"):
        PatternScaler().fit(X)


def test_bad_train_fraction():
    raw = window_cycles(generate_synthetic(2, 1, seed=0))
    for frac in (0.0, 1.0, 1.5):
        with pytest.raises(ValidationError):
            normalize_and_split(raw, frac, 0)


def test_split_save_load_round_trip(tmp_path, small_split):
    small_split.save(tmp_path)
    raw = (tmp_path / "train.bin").read_bytes()
    assert raw[:4] == b"TWDT"
    assert len(raw) == 16 + len(small_split.train_X) * 34 * 5 * 8
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["features"] == list(FEATURES)
    loaded = DatasetSplit.load(tmp_path)
    assert loaded.train_X.tobytes() == small_split.train_X.tobytes()
    assert np.array_equal(loaded.test_y, small_split.test_y)
    assert np.array_equal(read_patterns(tmp_path / "test.bin"), small_split.test_X)


def test_read_patterns_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValidationError):
        read_patterns(p)


# CSV ingestion


@pytest.fixture
def csv_path(tmp_path):
    path = tmp_path / "cycles.csv"
    write_csv(generate_synthetic(2, 1, seed=0)[:1], path)
    return path


def test_ingest_single_cycle(csv_path):
    cycles = ingest_csv(csv_path)
    assert len(cycles) == 1
    assert cycles[0].readings.shape == (170, 6)
    assert cycles[0].features.shape == (170, 5)
    assert cycles[0].provenance["dropped_columns"] == ["voltage_charge"]


def test_ingest_round_trip_values(tmp_path):
    cycles = generate_synthetic(2, 2, seed=11)
    path = tmp_path / "c.csv"
    write_csv(cycles, path)
    back = ingest_csv(path)
    for a, b in zip(cycles, back):
        assert (a.dt_id, a.cycle_id) == (b.dt_id, b.cycle_id)
        assert np.array_equal(a.readings, b.readings)


def test_ingest_warns_on_voltage_charge_mismatch(csv_path):
    df = pd.read_csv(csv_path)
    df["voltage_charge"] += 0.5
    df.to_csv(csv_path, index=False)
    with pytest.warns(IngestWarning):
        cycles = ingest_csv(csv_path)
    assert len(cycles) == 1 and cycles[0].features.shape[1] == 5
    assert cycles[0].provenance["voltage_charge_mismatch"] is True


def test_ingest_clean_file_does_not_warn(csv_path):
    with warnings.catch_warnings():
        warnings.simplefilter("error", IngestWarning)
        ingest_csv(csv_path)


def test_ingest_missing_column_is_named(csv_path):
    df = pd.read_csv(csv_path).drop(columns=["capacity"])
    df.to_csv(csv_path, index=False)
    with pytest.raises(SchemaError, match="capacity") as exc:
        ingest_csv(csv_path)
    assert exc.value.column == "capacity"


def test_ingest_short_cycle_is_reported(csv_path):
    df = pd.read_csv(csv_path).iloc[:-1]
    df.to_csv(csv_path, index=False)
    with pytest.raises(ValidationError) as exc:
        ingest_csv(csv_path)
    assert exc.value.cycles == [(0, 0)]


def test_ingest_non_monotone_timestamps(csv_path):
    df = pd.read_csv(csv_path)
    df.loc[5, "timestamp"] = df.loc[4, "timestamp"]
    df.to_csv(csv_path, index=False)
    with pytest.raises(ValidationError, match="cycle_id=0"):
        ingest_csv(csv_path)


def test_csv_header_order(csv_path):
    assert tuple(pd.read_csv(csv_path, nrows=0).columns) == CSV_COLUMNS
