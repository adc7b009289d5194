"""
Module for censoring-aware evaluation metrics.

OVERVIEW:
=========
- kaplan_meier: product-limit estimator; pass flipped events to estimate the
  censoring survival function G.
- c_index: concordance over comparable pairs, optionally truncated at a
  horizon. The default weighting counts each pair (i, j) with weight
  delta_i + delta_j; "harrell" weights every pair by 1.
- brier_score: inverse-probability-of-censoring weighted squared error of the
  predicted survival at a horizon.
- percentile_horizons: the 25/50/75th percentiles of the training times.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from src.components.errors import InputError, UndefinedMetricError

WEIGHTINGS = ("event_weighted", "harrell")
HORIZON_PERCENTILES = (("p25", 25.0), ("p50", 50.0), ("p75", 75.0))


@dataclass(frozen=True, eq=False)
class KaplanMeier:
    """Right-continuous step function; 1 before the first time."""

    times: np.ndarray
    surv: np.ndarray

    def __call__(self, t) -> np.ndarray:
        pos = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return np.where(pos >= 0, self.surv[np.maximum(pos, 0)], 1.0)

    def left_limit(self, t) -> np.ndarray:
        """Value just before t."""
        pos = np.searchsorted(self.times, np.asarray(t, dtype=float), side="left") - 1
        return np.where(pos >= 0, self.surv[np.maximum(pos, 0)], 1.0)


@dataclass(frozen=True)
class Horizon:
    t: float
    label: str

    def __post_init__(self):
        if not (np.isfinite(self.t) and self.t > 0):
            raise InputError(f"Horizon must be positive, got {self.t}")


def _check_survival_arrays(times, events) -> Tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=float).reshape(-1)
    events = np.asarray(events).astype(bool).reshape(-1)
    if times.shape[0] == 0:
        raise InputError("Empty survival sample")
    if times.shape != events.shape:
        raise InputError(f"times and events lengths differ: {times.shape[0]} vs {events.shape[0]}")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise InputError("Times must be finite and positive")
    return times, events


def kaplan_meier(times, events) -> KaplanMeier:
    times, events = _check_survival_arrays(times, events)
    unique_times, inverse = np.unique(times, return_inverse=True)
    deaths = np.bincount(inverse, weights=events.astype(float))
    leaving = np.bincount(inverse)
    at_risk = times.shape[0] - np.cumsum(leaving) + leaving
    surv = np.cumprod(1.0 - deaths / at_risk)
    return KaplanMeier(times=unique_times, surv=surv)


def censoring_km(times, events) -> KaplanMeier:
    """Kaplan-Meier of the censoring distribution (censoring treated as the event)."""
    return kaplan_meier(times, ~np.asarray(events).astype(bool))


class _Fenwick:
    """Prefix sums over 1-based ranks."""

    def __init__(self, size: int):
        self.tree = np.zeros(size + 1)

    def add(self, rank: int, value: float):
        while rank < self.tree.shape[0]:
            self.tree[rank] += value
            rank += rank & -rank

    def prefix(self, rank: int) -> float:
        total = 0.0
        while rank > 0:
            total += self.tree[rank]
            rank -= rank & -rank
        return total


def _horizon_value(horizon: Union[Horizon, float, None]) -> float:
    if horizon is None:
        return np.inf
    return horizon.t if isinstance(horizon, Horizon) else float(horizon)


def c_index(
    times,
    events,
    risk_scores,
    horizon: Union[Horizon, float, None] = None,
    weighting: str = "event_weighted",
) -> float:
    """
    Concordance of risk scores with observed event order.

    Pairs (i, j) are comparable when t_i < t_j, delta_i = 1 and t_i <= horizon.
    A pair scores its weight when r_i > r_j and half its weight on a tie.
    Subjects are swept from the latest time backwards with Fenwick trees over
    score ranks, so the cost is O(n log n).

    Raises:
        UndefinedMetricError: no comparable pair exists.
    """
    if weighting not in WEIGHTINGS:
        raise InputError(f"Unknown weighting '{weighting}', expected one of {WEIGHTINGS}")
    times, events = _check_survival_arrays(times, events)
    scores = np.asarray(risk_scores, dtype=float).reshape(-1)
    if scores.shape != times.shape:
        raise InputError(f"Got {scores.shape[0]} scores for {times.shape[0]} subjects")
    if not np.all(np.isfinite(scores)):
        raise InputError("Risk scores must be finite")
    limit = _horizon_value(horizon)

    _, ranks = np.unique(scores, return_inverse=True)
    ranks = ranks + 1
    counts = _Fenwick(int(ranks.max()))
    event_counts = _Fenwick(int(ranks.max()))
    inserted = 0
    inserted_events = 0
    numerator = 0.0
    denominator = 0.0
    weighted = weighting == "event_weighted"

    order = np.argsort(-times, kind="mergesort")
    start = 0
    while start < order.shape[0]:
        stop = start
        while stop < order.shape[0] and times[order[stop]] == times[order[start]]:
            stop += 1
        group = order[start:stop]
        for i in group:
            if not events[i] or times[i] > limit or inserted == 0:
                continue
            r = ranks[i]
            less, upto = counts.prefix(r - 1), counts.prefix(r)
            if weighted:
                less += event_counts.prefix(r - 1)
                upto += event_counts.prefix(r)
                total = inserted + inserted_events
            else:
                total = inserted
            numerator += less + 0.5 * (upto - less)
            denominator += total
        for i in group:
            counts.add(ranks[i], 1.0)
            event_counts.add(ranks[i], float(events[i]))
            inserted += 1
            inserted_events += int(events[i])
        start = stop

    if denominator == 0:
        raise UndefinedMetricError("No comparable pairs for the C-index")
    return float(numerator / denominator)


def brier_score(
    times,
    events,
    surv_at_t,
    censor_km: KaplanMeier,
    horizon: Union[Horizon, float],
) -> float:
    """
    IPCW Brier score at one horizon.

    Args:
        times: Observed test times.
        events: Test event indicators.
        surv_at_t: Predicted S(t | x_i) at the horizon for each test subject.
        censor_km: Kaplan-Meier of the censoring distribution, fitted on train.
        horizon: Evaluation time t.

    Returns:
        float: Mean weighted squared error; subjects censored before t count 0.
    """
    times, events = _check_survival_arrays(times, events)
    surv_at_t = np.asarray(surv_at_t, dtype=float).reshape(-1)
    if surv_at_t.shape != times.shape:
        raise InputError(f"Got {surv_at_t.shape[0]} predictions for {times.shape[0]} subjects")
    t = _horizon_value(horizon)

    died = events & (times <= t)
    survived = times > t
    g_event = censor_km.left_limit(times[died])
    g_horizon = float(censor_km(t)) if survived.any() else 1.0
    if np.any(g_event <= 0) or g_horizon <= 0:
        raise UndefinedMetricError(f"Censoring survival is zero where the Brier score at t={t} needs it")

    total = np.sum(surv_at_t[died] ** 2 / g_event) + np.sum((surv_at_t[survived] - 1.0) ** 2) / g_horizon
    return float(total / times.shape[0])


def percentile_horizons(train_times) -> Tuple[Horizon, Horizon, Horizon]:
    train_times = np.asarray(train_times, dtype=float).reshape(-1)
    if train_times.shape[0] == 0:
        raise InputError("Cannot take percentiles of an empty time vector")
    values = np.percentile(train_times, [q for _, q in HORIZON_PERCENTILES])
    return tuple(Horizon(float(v), label) for v, (label, _) in zip(values, HORIZON_PERCENTILES))


def horizon_metrics(
    test_time,
    test_event,
    risk_scores,
    survival_at: Callable[[float], np.ndarray],
    horizons: Sequence[Horizon],
    censor: KaplanMeier,
    weighting: str = "event_weighted",
) -> List[Dict[str, Optional[float]]]:
    """
    One metric cell per horizon plus the untruncated C-index.

    Cells that cannot be computed hold None and a "reason" entry.
    """
    cells = []
    for horizon in list(horizons) + [None]:
        cell: Dict[str, Optional[float]] = {
            "horizon_label": horizon.label if horizon else "all",
            "horizon_t": horizon.t if horizon else None,
        }
        reasons = []
        try:
            cell["c_index"] = c_index(test_time, test_event, risk_scores, horizon, weighting)
        except UndefinedMetricError as e:
            cell["c_index"] = None
            reasons.append(str(e))
        if horizon is None:
            cell["brier"] = None
        else:
            try:
                cell["brier"] = brier_score(test_time, test_event, survival_at(horizon.t), censor, horizon)
            except UndefinedMetricError as e:
                cell["brier"] = None
                reasons.append(str(e))
        if reasons:
            cell["reason"] = "; ".join(reasons)
            logger.warning(f"Metric cell {cell['horizon_label']} undefined: {cell['reason']}")
        cells.append(cell)
    return cells
