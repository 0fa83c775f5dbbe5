"""Heater telemetry: synthetic generation, CSV ingestion, windowing, scaling.

A cycle is 170 readings of five retained sensor features. Each cycle is cut
into five consecutive 34-row windows, which become the behavioural patterns
fed to the autoencoder after per-feature min-max scaling.
"""

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from twinforge.exceptions import NormalizationError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

READINGS_PER_CYCLE = 170
WINDOW_ROWS = 34
WINDOWS_PER_CYCLE = READINGS_PER_CYCLE // WINDOW_ROWS
FEATURES = (
    "voltage_measured",
    "current_measured",
    "temperature_measured",
    "current_charge",
    "capacity",
)
N_FEATURES = len(FEATURES)
READING_COLUMNS = ("timestamp",) + FEATURES
CSV_COLUMNS = (
    "dt_id",
    "cycle_id",
    "timestamp",
    "voltage_measured",
    "current_measured",
    "temperature_measured",
    "current_charge",
    "voltage_charge",
    "capacity",
)
SAMPLE_INTERVAL_S = 15.0

SPLIT_MAGIC = b"TWDT"
SPLIT_VERSION = 1


class IngestWarning(UserWarning):
    pass


class SensorReading(NamedTuple):
    timestamp: float
    voltage_measured: float
    current_measured: float
    temperature_measured: float
    current_charge: float
    capacity: float


@dataclass
class Cycle:
    """One experiment cycle. ``readings`` columns follow ``READING_COLUMNS``."""

    dt_id: int
    cycle_id: int
    readings: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.readings.shape != (READINGS_PER_CYCLE, len(READING_COLUMNS)):
            raise ValidationError(
                f"cycle ({self.dt_id}, {self.cycle_id}) has shape {self.readings.shape}, "
                f"expected {(READINGS_PER_CYCLE, len(READING_COLUMNS))}"
            )
        if self.dt_id < 0:
            raise ValidationError(f"dt_id must be non-negative, got {self.dt_id}")
        if not np.all(np.isfinite(self.readings)):
            raise ValidationError(f"cycle ({self.dt_id}, {self.cycle_id}) has non-finite values")
        if np.any(np.diff(self.readings[:, 0]) <= 0):
            raise ValidationError(
                f"timestamps not strictly increasing in cycle ({self.dt_id}, {self.cycle_id})"
            )

    def __len__(self):
        return len(self.readings)

    def reading(self, i):
        return SensorReading(*map(float, self.readings[i]))

    @property
    def features(self):
        return self.readings[:, 1:]

    @property
    def timestamps(self):
        return self.readings[:, 0]


@dataclass
class RawPattern:
    """A 34-row window cut from a cycle, before scaling."""

    dt_id: int
    cycle_id: int
    window_index: int
    timestamps: np.ndarray
    values: np.ndarray


@dataclass
class BehaviouralPattern:
    dt_id: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (WINDOW_ROWS, N_FEATURES):
            raise ValidationError(
                f"behavioural pattern must be {WINDOW_ROWS}x{N_FEATURES}, got {self.values.shape}"
            )


# --------------------------------------------------------------------------
# synthetic generation


def _spread_levels(rng, n, low, high):
    """Evenly spaced levels in random order, jittered by 10% of the spacing."""
    levels = np.linspace(low, high, n)
    spacing = (high - low) / max(n - 1, 1)
    return rng.permutation(levels) + rng.uniform(-0.1, 0.1, n) * spacing


def _device_parameters(rng, dt_count):
    rise = _spread_levels(rng, dt_count, 20.0, 44.0)
    # hotter devices also heat faster, so temperature curves never cross
    rank = np.argsort(np.argsort(rise))
    tau = np.linspace(1000.0, 400.0, dt_count)[rank]
    return {
        "temp_rise": rise,
        "temp_tau": tau,
        "voltage_base": _spread_levels(rng, dt_count, 4.0, 4.15),
        "voltage_sag": _spread_levels(rng, dt_count, 0.4, 1.2),
        "current_base": _spread_levels(rng, dt_count, 1.35, 1.65),
        "current_noise": _spread_levels(rng, dt_count, 0.02, 0.06),
        "charge_ratio": _spread_levels(rng, dt_count, 0.86, 0.94),
        "capacity_base": _spread_levels(rng, dt_count, 1.75, 1.9),
        "capacity_fade": _spread_levels(rng, dt_count, 4e-4, 1.6e-3),
    }


def generate_synthetic(dt_count, cycles_per_dt, seed=0):
    """Simulate ``dt_count`` heaters for ``cycles_per_dt`` cycles each.

    Every device has its own temperature time-constant and rise, voltage
    level and sag slope, current level and noise amplitude, charge ratio and
    capacity fade rate. Temperature follows a first-order response towards
    ambient + rise, voltage sags linearly over the cycle, and capacity fades
    per cycle. A per-cycle load factor scales the current fully and the
    temperature rise weakly, so current levels of neighbouring devices overlap.
    """
    if int(dt_count) < 2:
        raise ValidationError(f"dt_count must be >= 2, got {dt_count}")
    if int(cycles_per_dt) < 1:
        raise ValidationError(f"cycles_per_dt must be >= 1, got {cycles_per_dt}")
    rng = np.random.default_rng(seed)
    dev = _device_parameters(rng, dt_count)
    t = np.arange(READINGS_PER_CYCLE) * SAMPLE_INTERVAL_S
    frac = t / t[-1]
    cycles = []
    for dt in range(dt_count):
        for c in range(cycles_per_dt):
            load = rng.uniform(0.92, 1.08)
            ambient = 22.0 + rng.normal(0.0, 0.3)
            rise = dev["temp_rise"][dt] * (1.0 + 0.25 * (load - 1.0) + rng.normal(0.0, 0.01))
            tau = dev["temp_tau"][dt] * (1.0 + rng.normal(0.0, 0.05))
            temp = ambient + rise * (1.0 - np.exp(-t / tau))
            temp += rng.normal(0.0, 0.2, t.shape)

            v0 = dev["voltage_base"][dt] + rng.normal(0.0, 0.01)
            volt = v0 - dev["voltage_sag"][dt] * 0.25 * frac + rng.normal(0.0, 0.006, t.shape)

            sigma_i = dev["current_noise"][dt]
            i0 = dev["current_base"][dt] * load
            cur = i0 + rng.normal(0.0, sigma_i, t.shape)
            charge = dev["charge_ratio"][dt] * i0 + rng.normal(0.0, sigma_i / 2.0, t.shape)

            cap0 = dev["capacity_base"][dt] * (1.0 - dev["capacity_fade"][dt] * c)
            cap = cap0 + rng.normal(0.0, 2e-3, t.shape)

            readings = np.column_stack([t, volt, cur, temp, charge, cap])
            cycles.append(Cycle(dt, c, readings, {"source": "synthetic", "seed": seed}))
    return cycles


# --------------------------------------------------------------------------
# CSV ingestion


def write_csv(cycles, path):
    """Write cycles in the ingestion schema; voltage_charge mirrors voltage."""
    frames = []
    for cyc in cycles:
        df = pd.DataFrame(cyc.readings, columns=READING_COLUMNS)
        df.insert(0, "cycle_id", cyc.cycle_id)
        df.insert(0, "dt_id", cyc.dt_id)
        df["voltage_charge"] = df["voltage_measured"]
        frames.append(df[list(CSV_COLUMNS)])
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")


def ingest_csv(path):
    """Read a telemetry CSV into cycles, dropping the redundant voltage_charge."""
    df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    for col in CSV_COLUMNS:
        if col not in df.columns:
            raise SchemaError(col)
    numeric = df[list(CSV_COLUMNS)].apply(pd.to_numeric, errors="coerce")
    if numeric.isna().any().any():
        bad = numeric.columns[numeric.isna().any()].tolist()
        raise ValidationError(f"non-numeric or missing values in columns {bad}")

    mismatch = not np.allclose(numeric["voltage_charge"], numeric["voltage_measured"], atol=1e-9)
    if mismatch:
        warnings.warn(
            "voltage_charge differs from voltage_measured; discarding it anyway",
            IngestWarning,
            stacklevel=2,
        )
    logger.info("ingest %s: dropped column voltage_charge", path)

    groups = numeric.groupby(["dt_id", "cycle_id"], sort=True)
    wrong_length = [
        (int(k[0]), int(k[1])) for k, g in groups if len(g) != READINGS_PER_CYCLE
    ]
    if wrong_length:
        err = ValidationError(
            f"cycles without exactly {READINGS_PER_CYCLE} rows (dt_id, cycle_id): {wrong_length}"
        )
        err.cycles = wrong_length
        raise err

    cycles = []
    for (dt_id, cycle_id), g in groups:
        ts = g["timestamp"].to_numpy()
        if np.any(np.diff(ts) <= 0):
            err = ValidationError(
                f"timestamps not strictly increasing in cycle (dt_id={int(dt_id)}, "
                f"cycle_id={int(cycle_id)})"
            )
            err.cycles = [(int(dt_id), int(cycle_id))]
            raise err
        provenance = {
            "source": str(path),
            "dropped_columns": ["voltage_charge"],
            "voltage_charge_mismatch": bool(mismatch),
        }
        cycles.append(
            Cycle(int(dt_id), int(cycle_id), g[list(READING_COLUMNS)].to_numpy(), provenance)
        )
    return cycles


# --------------------------------------------------------------------------
# windowing, scaling, splitting


def window_cycles(cycles):
    """Cut every cycle into consecutive, non-overlapping 34-row windows."""
    out = []
    for cyc in cycles:
        if len(cyc) != READINGS_PER_CYCLE:
            raise ValidationError(f"cycle ({cyc.dt_id}, {cyc.cycle_id}) is not {READINGS_PER_CYCLE} rows")
        for w in range(WINDOWS_PER_CYCLE):
            rows = slice(w * WINDOW_ROWS, (w + 1) * WINDOW_ROWS)
            out.append(
                RawPattern(
                    cyc.dt_id,
                    cyc.cycle_id,
                    w,
                    cyc.timestamps[rows].copy(),
                    cyc.features[rows].copy(),
                )
            )
    return out


class PatternScaler(TransformerMixin, BaseEstimator):
    """Per-feature min-max scaling for (n, rows, features) pattern stacks.

    Unlike sklearn's MinMaxScaler this pools every row of every pattern per
    feature, names the offending feature on zero range, and clamps.
    """

    def __init__(self, feature_names=FEATURES, clip=True):
        self.feature_names = feature_names
        self.clip = clip

    def _flat(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.feature_names):
            raise ValidationError(
                f"expected {len(self.feature_names)} features, got {X.shape[-1]}"
            )
        return X.reshape(-1, X.shape[-1])

    def fit(self, X, y=None):
        flat = self._flat(X)
        if not len(flat):
            raise ValidationError("cannot fit scaler on empty data")
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        for name, a, b in zip(self.feature_names, lo, hi):
            if not b > a:
                raise NormalizationError(name)
        self.data_min_, self.data_max_ = lo, hi
        self.n_features_in_ = flat.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "data_min_")
        X = np.asarray(X, dtype=np.float64)
        self._flat(X)
        out = (X - self.data_min_) / (self.data_max_ - self.data_min_)
        return np.clip(out, 0.0, 1.0) if self.clip else out

    def inverse_transform(self, X):
        check_is_fitted(self, "data_min_")
        X = np.asarray(X, dtype=np.float64)
        return X * (self.data_max_ - self.data_min_) + self.data_min_


@dataclass
class DatasetSplit:
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray
    scaler: PatternScaler
    split_seed: int
    train_fraction: float

    @property
    def train(self):
        return [BehaviouralPattern(int(y), x) for x, y in zip(self.train_X, self.train_y)]

    @property
    def test(self):
        return [BehaviouralPattern(int(y), x) for x, y in zip(self.test_X, self.test_y)]

    @property
    def n_classes(self):
        return int(max(self.train_y.max(), self.test_y.max())) + 1

    @property
    def normalization_stats(self):
        return {
            "features": list(self.scaler.feature_names),
            "min": self.scaler.data_min_.tolist(),
            "max": self.scaler.data_max_.tolist(),
        }

    def patterns_of(self, dt_id, subset="test"):
        X, y = (self.test_X, self.test_y) if subset == "test" else (self.train_X, self.train_y)
        return X[y == dt_id]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_patterns(directory / "train.bin", self.train_X)
        _write_patterns(directory / "test.bin", self.test_X)
        stats = dict(self.normalization_stats)
        stats.update(
            seed=self.split_seed,
            train_fraction=self.train_fraction,
            train_labels=self.train_y.tolist(),
            test_labels=self.test_y.tolist(),
        )
        (directory / "stats.json").write_text(json.dumps(stats, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        stats_path = directory / "stats.json"
        if not stats_path.exists():
            raise ValidationError(f"{directory} is not a dataset directory (no stats.json)")
        stats = json.loads(stats_path.read_text(encoding="utf-8"))
        scaler = PatternScaler(tuple(stats["features"]))
        scaler.data_min_ = np.asarray(stats["min"], dtype=np.float64)
        scaler.data_max_ = np.asarray(stats["max"], dtype=np.float64)
        scaler.n_features_in_ = len(stats["features"])
        train_X = read_patterns(directory / "train.bin")
        test_X = read_patterns(directory / "test.bin")
        train_y = np.asarray(stats["train_labels"], dtype=np.int64)
        test_y = np.asarray(stats["test_labels"], dtype=np.int64)
        if len(train_y) != len(train_X) or len(test_y) != len(test_X):
            raise ValidationError("label count does not match pattern count")
        return cls(train_X, train_y, test_X, test_y, scaler, int(stats["seed"]),
                   float(stats["train_fraction"]))


def _write_patterns(path, X):
    header = SPLIT_MAGIC + struct.pack("<III", SPLIT_VERSION, len(X), 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def read_patterns(path):
    """Read a ``.bin`` pattern file into an (n, 34, 5) array."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != SPLIT_MAGIC:
        raise ValidationError(f"{path}: not a TWDT pattern file")
    version, count, _ = struct.unpack_from("<III", data, 4)
    if version != SPLIT_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    expected = 16 + count * WINDOW_ROWS * N_FEATURES * 8
    if len(data) != expected:
        raise ValidationError(f"{path}: size {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
    return arr.reshape(count, WINDOW_ROWS, N_FEATURES)


def normalize_and_split(matrices, train_fraction=0.8, seed=0):
    """Stratified shuffle split by dt_id, then min-max scaling fitted on train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if not matrices:
        raise ValidationError("no patterns to split")
    X = np.stack([m.values for m in matrices]).astype(np.float64)
    y = np.asarray([m.dt_id for m in matrices], dtype=np.int64)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        n_train = int(round(len(idx) * train_fraction))
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    scaler = PatternScaler().fit(X[train_idx])
    return DatasetSplit(
        scaler.transform(X[train_idx]),
        y[train_idx],
        scaler.transform(X[test_idx]),
        y[test_idx],
        scaler,
        int(seed),
        float(train_fraction),
    )


def build_reference_split(dt_count=4, cycles_per_dt=132, seed=7, train_fraction=0.8):
    """Generate, window and split in one call (reference scale by default)."""
    cycles = generate_synthetic(dt_count, cycles_per_dt, seed)
    return normalize_and_split(window_cycles(cycles), train_fraction, seed)
