"""
Module for survival datasets: synthetic generators, tabular ingestion and splits.

OVERVIEW:
=========
Synthetic data follow t = t0 / exp(f(x)) with x ~ U(-1, 1)^2 and t0 drawn from
an exponential distribution. Two ground truths are available:

    linear:     f(x) = x1 + 2 * x2
    nonlinear:  f(x) = ln(lambda) * exp(-(x1^2 + x2^2) / (2 r^2))

Times above the (1 - censor_fraction) quantile are capped at that quantile
and marked censored.

Tabular files (CSV or Excel) are encoded column by column:
- numeric columns are z-scored with the mean and sd of the fitting data
  unless the schema sets standardize to false,
- numeric 0/1 columns are kept as they are,
- categorical columns are one-hot encoded with the lexicographically first
  level dropped; a two-level categorical therefore becomes one 0/1 column.
The resulting Encoding is kept on the Dataset so a test file can be encoded
exactly like the training file.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from src.components.errors import ConfigurationError, DataError

SYNTHETIC_KINDS = ("linear", "nonlinear")
COLUMN_KINDS = ("numeric", "binary", "categorical")
EXCEL_SUFFIXES = (".xlsx", ".xlsm", ".xls")


@dataclass(frozen=True)
class SyntheticConfig:
    kind: str = "linear"
    n: int = 2000
    lam: float = 5.0
    r: float = 2.0
    mean_t0: float = 5.0
    censor_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ConfigurationError(f"Unknown synthetic kind '{self.kind}', expected one of {SYNTHETIC_KINDS}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError(f"n must be a positive integer, got {self.n}")
        for name in ("lam", "r", "mean_t0"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if not 0 <= self.censor_fraction < 1:
            raise ConfigurationError(f"censor_fraction must lie in [0, 1), got {self.censor_fraction}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class ColumnEncoding:
    """How one source column maps to model columns."""

    source: str
    kind: str
    levels: Tuple[str, ...] = ()
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise ConfigurationError(f"Unknown column kind '{self.kind}'")

    @property
    def output_names(self) -> List[str]:
        if self.kind == "categorical":
            return [f"{self.source}_{level}" for level in self.levels[1:]]
        return [self.source]

    def to_dict(self) -> dict:
        return {"source": self.source, "kind": self.kind, "levels": list(self.levels), "mean": self.mean, "sd": self.sd}


@dataclass(frozen=True)
class Encoding:
    time_col: str
    event_col: str
    columns: Tuple[ColumnEncoding, ...]
    standardize: bool = True

    def to_dict(self) -> dict:
        return {
            "time_col": self.time_col,
            "event_col": self.event_col,
            "standardize": self.standardize,
            "columns": [c.to_dict() for c in self.columns],
        }


@dataclass(frozen=True)
class CsvSchema:
    """Which columns of a tabular file hold time, event and features."""

    time_col: str = "time"
    event_col: str = "event"
    feature_cols: Optional[Tuple[str, ...]] = None
    categorical_cols: Tuple[str, ...] = ()
    truth_col: str = "truth"
    standardize: bool = True

    def __post_init__(self):
        if self.time_col == self.event_col:
            raise ConfigurationError("time_col and event_col must differ")
        if self.feature_cols is not None:
            object.__setattr__(self, "feature_cols", tuple(self.feature_cols))
        object.__setattr__(self, "categorical_cols", tuple(self.categorical_cols))

    @classmethod
    def from_json(cls, path) -> "CsvSchema":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read schema file {path}: {e}") from e
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigurationError(f"Unknown schema keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        return {
            "time_col": self.time_col,
            "event_col": self.event_col,
            "feature_cols": None if self.feature_cols is None else list(self.feature_cols),
            "categorical_cols": list(self.categorical_cols),
            "truth_col": self.truth_col,
            "standardize": self.standardize,
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Encoded survival data.

    raw_X holds the encoded but unstandardized covariates; X applies the
    stored (mean, sd) pairs.
    """

    raw_X: np.ndarray
    time: np.ndarray
    event: np.ndarray
    feature_names: Tuple[str, ...]
    standardization: Tuple[Tuple[float, float], ...] = ()
    ground_truth: Optional[np.ndarray] = None
    encoding: Optional[Encoding] = None

    def __post_init__(self):
        raw_X = np.asarray(self.raw_X, dtype=float)
        time = np.asarray(self.time, dtype=float).reshape(-1)
        event = np.asarray(self.event).astype(bool).reshape(-1)
        if raw_X.ndim != 2 or raw_X.shape[0] != time.shape[0] or event.shape != time.shape:
            raise DataError("Covariates, times and events must have matching lengths")
        names = tuple(self.feature_names)
        if len(names) != raw_X.shape[1]:
            raise DataError(f"Got {len(names)} feature names for {raw_X.shape[1]} columns")
        stats = tuple(self.standardization) or tuple((0.0, 1.0) for _ in names)
        if len(stats) != len(names):
            raise DataError("Standardization must hold one (mean, sd) pair per feature")
        truth = self.ground_truth
        if truth is not None:
            truth = np.asarray(truth, dtype=float).reshape(-1)
            if truth.shape != time.shape:
                raise DataError("Ground truth length differs from the number of records")
        object.__setattr__(self, "raw_X", raw_X)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "standardization", tuple((float(m), float(s)) for m, s in stats))
        object.__setattr__(self, "ground_truth", truth)

    @property
    def num_records(self) -> int:
        return self.time.shape[0]

    @property
    def X(self) -> np.ndarray:
        means = np.array([m for m, _ in self.standardization])
        sds = np.array([s for _, s in self.standardization])
        return (self.raw_X - means) / sds

    @property
    def raw_ranges(self) -> List[Tuple[float, float]]:
        return [(float(c.min()), float(c.max())) for c in self.raw_X.T]

    def subset(self, indices: np.ndarray) -> "Dataset":
        truth = None if self.ground_truth is None else self.ground_truth[indices]
        return replace(
            self,
            raw_X=self.raw_X[indices],
            time=self.time[indices],
            event=self.event[indices],
            ground_truth=truth,
        )


def synthetic_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent PCG64 streams for covariates and baseline times."""
    covariates, baseline = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(covariates), np.random.default_rng(baseline)


def true_log_risk(cfg: SyntheticConfig, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if cfg.kind == "linear":
        return X[:, 0] + 2.0 * X[:, 1]
    return np.log(cfg.lam) * np.exp(-(X[:, 0] ** 2 + X[:, 1] ** 2) / (2.0 * cfg.r**2))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    covariate_rng, baseline_rng = synthetic_streams(cfg.seed)
    X = covariate_rng.uniform(-1.0, 1.0, size=(cfg.n, 2))
    t0 = baseline_rng.exponential(cfg.mean_t0, size=cfg.n)
    truth = true_log_risk(cfg, X)
    time = t0 / np.exp(truth)
    event = np.ones(cfg.n, dtype=bool)
    if cfg.censor_fraction > 0:
        cap = float(np.quantile(time, 1.0 - cfg.censor_fraction))
        capped = time > cap
        time = np.where(capped, cap, time)
        event = ~capped
    logger.debug(f"Synthetic {cfg.kind} data: n={cfg.n}, censored={1.0 - event.mean():.4f}, seed={cfg.seed}")
    return Dataset(raw_X=X, time=time, event=event, feature_names=("x1", "x2"), ground_truth=truth)


def _read_table(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"File not found: {path}")
    try:
        if path.suffix.lower() in EXCEL_SUFFIXES:
            return pd.read_excel(path, sheet_name=0, dtype=object)
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"Cannot read {path}: {e}") from e


def _numeric_column(df: pd.DataFrame, col: str) -> np.ndarray:
    raw = df[col]
    cleaned = raw.map(lambda v: v.strip() if isinstance(v, str) else v)
    try:
        # correctly rounded, so %.17g values round-trip exactly
        values = cleaned.astype(float).to_numpy()
    except (TypeError, ValueError):
        values = pd.to_numeric(cleaned, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        row = int(bad[0])
        raise DataError(f"Row {row + 1}, column '{col}': cannot parse {raw.iloc[row]!r} as a number")
    return values


def _event_column(df: pd.DataFrame, col: str) -> np.ndarray:
    mapping = {"1": True, "0": False, "1.0": True, "0.0": False, "true": True, "false": False}
    out = np.empty(len(df), dtype=bool)
    for row, value in enumerate(df[col]):
        key = str(value).strip().lower()
        if key not in mapping:
            raise DataError(f"Row {row + 1}, column '{col}': event must be 0/1, got {value!r}")
        out[row] = mapping[key]
    return out


def _categorical_levels(df: pd.DataFrame, col: str) -> np.ndarray:
    return df[col].map(lambda v: str(v).strip()).to_numpy(dtype=object)


def _fit_encoding(df: pd.DataFrame, schema: CsvSchema, features: Sequence[str]) -> Encoding:
    columns = []
    for col in features:
        if col in schema.categorical_cols:
            levels = tuple(sorted(set(_categorical_levels(df, col))))
            if len(levels) < 2:
                logger.warning(f"Categorical column '{col}' has a single level and adds no feature")
            columns.append(ColumnEncoding(col, "categorical", levels))
            continue
        values = _numeric_column(df, col)
        if np.all(np.isin(values, (0.0, 1.0))):
            columns.append(ColumnEncoding(col, "binary"))
            continue
        mean, sd = (float(values.mean()), float(values.std())) if schema.standardize else (0.0, 1.0)
        if sd == 0:
            raise DataError(f"Column '{col}' is constant and cannot be standardized")
        columns.append(ColumnEncoding(col, "numeric", mean=mean, sd=sd))
    return Encoding(schema.time_col, schema.event_col, tuple(columns), schema.standardize)


def _apply_encoding(df: pd.DataFrame, encoding: Encoding) -> Tuple[np.ndarray, List[str], List[Tuple[float, float]]]:
    blocks, names, stats = [], [], []
    for column in encoding.columns:
        if column.kind == "categorical":
            observed = _categorical_levels(df, column.source)
            unknown = sorted(set(observed) - set(column.levels))
            if unknown:
                row = int(np.flatnonzero(np.isin(observed, unknown))[0])
                raise DataError(
                    f"Row {row + 1}, column '{column.source}': unknown category {observed[row]!r}"
                )
            for level in column.levels[1:]:
                blocks.append((observed == level).astype(float))
                stats.append((0.0, 1.0))
        else:
            values = _numeric_column(df, column.source)
            if column.kind == "binary" and not np.all(np.isin(values, (0.0, 1.0))):
                row = int(np.flatnonzero(~np.isin(values, (0.0, 1.0)))[0])
                raise DataError(f"Row {row + 1}, column '{column.source}': expected 0/1, got {values[row]}")
            blocks.append(values)
            stats.append((column.mean, column.sd))
        names.extend(column.output_names)
    raw_X = np.column_stack(blocks) if blocks else np.zeros((len(df), 0))
    return raw_X, names, stats


def load_csv(path, schema: CsvSchema = CsvSchema(), encoding: Optional[Encoding] = None) -> Dataset:
    """
    Load and encode a CSV or Excel file.

    Args:
        path: File path; .xlsx/.xlsm/.xls files are read from their first sheet.
        schema: Column roles.
        encoding: Encoding of a previously loaded training file; when given,
            its levels and standardization are reused.

    Returns:
        Dataset: Rows in file order.
    """
    path = Path(path)
    df = _read_table(path)
    if df.empty:
        raise DataError(f"{path} holds no data rows")
    required = [schema.time_col, schema.event_col]
    if schema.feature_cols is not None:
        features = list(schema.feature_cols)
    else:
        excluded = {schema.time_col, schema.event_col, schema.truth_col}
        features = [c for c in df.columns if c not in excluded]
    if encoding is not None:
        features = [c.source for c in encoding.columns]
    for col in required + features + list(schema.categorical_cols):
        if col not in df.columns:
            raise DataError(f"Column '{col}' missing from {path}")
    if not features:
        raise DataError(f"No feature columns in {path}")

    time = _numeric_column(df, schema.time_col)
    bad = np.flatnonzero(time <= 0)
    if bad.size:
        raise DataError(f"Row {int(bad[0]) + 1}, column '{schema.time_col}': time must be positive, got {time[bad[0]]}")
    event = _event_column(df, schema.event_col)

    if encoding is None:
        encoding = _fit_encoding(df, schema, features)
    raw_X, names, stats = _apply_encoding(df, encoding)
    if raw_X.shape[1] == 0:
        raise DataError(f"Encoding of {path} produced no feature columns")
    truth = _numeric_column(df, schema.truth_col) if schema.truth_col in df.columns else None
    logger.info(f"Loaded {len(df)} rows and {len(names)} features from {path}")
    return Dataset(raw_X, time, event, tuple(names), tuple(stats), truth, encoding)


def write_csv(ds: Dataset, path) -> Path:
    """Write raw (unstandardized) covariates, time, event and ground truth if present."""
    path = Path(path)
    frame = pd.DataFrame(ds.raw_X, columns=list(ds.feature_names))
    frame["time"] = ds.time
    frame["event"] = ds.event.astype(int)
    if ds.ground_truth is not None:
        frame["truth"] = ds.ground_truth
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Dataset written to {path}")
    return path


def _standardizable(ds: Dataset) -> np.ndarray:
    """Mask of model columns that carry z-score statistics."""
    if ds.encoding is None:
        return np.ones(len(ds.feature_names), dtype=bool)
    mask: List[bool] = []
    for column in ds.encoding.columns:
        numeric = column.kind == "numeric" and ds.encoding.standardize
        mask.extend([numeric] * len(column.output_names))
    return np.array(mask, dtype=bool)


def restandardize(ds: Dataset, reference: Dataset) -> Tuple[Tuple[float, float], ...]:
    """(mean, sd) per column computed on reference, identity for 0/1 columns."""
    stats = []
    for v, numeric in enumerate(_standardizable(ds)):
        if not numeric:
            stats.append((0.0, 1.0))
            continue
        column = reference.raw_X[:, v]
        sd = float(column.std())
        if sd == 0:
            raise DataError(f"Column '{ds.feature_names[v]}' is constant on the training part")
        stats.append((float(column.mean()), sd))
    return tuple(stats)


def split(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle into train and test, standardized on train statistics."""
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(ds.num_records * test_fraction))
    n_train = ds.num_records - n_test
    if n_test < 1 or n_train < 1:
        raise DataError(f"Split of {ds.num_records} records at {test_fraction} leaves an empty part")
    permutation = np.random.default_rng(seed).permutation(ds.num_records)
    train_idx = np.sort(permutation[:n_train])
    test_idx = np.sort(permutation[n_train:])
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    if not train.event.any():
        raise DataError("Training part of the split has no events")
    stats = restandardize(ds, train)
    encoding = ds.encoding
    if encoding is not None:
        encoding = _encoding_with_stats(encoding, stats)
    logger.debug(f"Split {ds.num_records} records into {n_train} train / {n_test} test (seed={seed})")
    return (
        replace(train, standardization=stats, encoding=encoding),
        replace(test, standardization=stats, encoding=encoding),
    )


def _encoding_with_stats(encoding: Encoding, stats: Sequence[Tuple[float, float]]) -> Encoding:
    columns, v = [], 0
    for column in encoding.columns:
        width = len(column.output_names)
        if column.kind == "numeric":
            mean, sd = stats[v]
            column = replace(column, mean=mean, sd=sd)
        columns.append(column)
        v += width
    return replace(encoding, columns=tuple(columns))
