"""
Plot-ready emissions: log-risk surfaces and per-feature curve samples.

Nothing is drawn here; the CSV files are meant for external plotting.
"""

from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from src.components.errors import InputError
from src.components.kan_model import GcphModel, log_risk_batch, per_feature_curve_raw, standardize

SURFACE_POINTS = 101
CURVE_POINTS = 201


def surface_frame(m: GcphModel, lo: float = -1.0, hi: float = 1.0, points: int = SURFACE_POINTS) -> pd.DataFrame:
    """f on a points x points grid over [lo, hi]^2 in raw units (two-feature models only)."""
    if m.num_features != 2:
        raise InputError(f"Surface emission needs a two-feature model, got {m.num_features} features")
    axis = np.linspace(lo, hi, points)
    x1, x2 = np.meshgrid(axis, axis, indexing="ij")
    raw = np.column_stack([x1.ravel(), x2.ravel()])
    return pd.DataFrame({"x1": raw[:, 0], "x2": raw[:, 1], "f": log_risk_batch(m, standardize(m, raw))})


def curve_frame(
    models: Sequence[GcphModel],
    names: Sequence[str],
    v: int,
    raw_range: Tuple[float, float],
    points: int = CURVE_POINTS,
) -> pd.DataFrame:
    """One x column in raw units plus one curve column per model."""
    xs = np.linspace(raw_range[0], raw_range[1], points)
    frame = pd.DataFrame({"x": xs})
    for name, m in zip(names, models):
        frame[name] = per_feature_curve_raw(m, v, xs)
    return frame


def write_frame(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Plot data written to {path}")
    return path


def write_curves(
    models: Sequence[GcphModel],
    names: Sequence[str],
    raw_ranges: Sequence[Tuple[float, float]],
    out_dir,
) -> List[Path]:
    """Write curve_<feature>.csv for every feature of the models."""
    out_dir = Path(out_dir)
    feature_names = models[0].feature_names
    return [
        write_frame(curve_frame(models, names, v, raw_ranges[v]), out_dir / f"curve_{feature}.csv")
        for v, feature in enumerate(feature_names)
    ]
