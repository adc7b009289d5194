"""
Module for Cox partial-likelihood machinery.

Shared by the spline model and the linear baseline: risk-set indexing, the
log-partial likelihood with Breslow ties and its gradient with respect to
per-subject scores, the Breslow cumulative baseline hazard, survival-curve
prediction and a Newton-Raphson fit of the linear Cox model.

All sums over risk sets are done by one sweep over subjects sorted by time,
accumulating log-sum-exp from the latest time towards the earliest.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger

from src.components.errors import ConfigurationError, InputError

# largest Newton step norm still accepted once the score has vanished
SEPARATION_STEP_NORM = 0.1


@dataclass(frozen=True, eq=False)
class SurvivalRecord:
    """One subject: covariates, observed time and event indicator."""

    x: np.ndarray
    time: float
    event: bool

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise InputError("Covariates must be finite")
        if not (np.isfinite(self.time) and self.time > 0):
            raise InputError(f"Observed time must be finite and positive, got {self.time}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "event", bool(self.event))


def stack_records(records: Sequence[SurvivalRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convert records into (X, time, event) arrays."""
    if len(records) == 0:
        raise InputError("No records given")
    X = np.vstack([r.x for r in records])
    time = np.array([r.time for r in records])
    event = np.array([r.event for r in records], dtype=bool)
    return X, time, event


@dataclass(frozen=True, eq=False)
class RiskSetIndex:
    """
    Sorted view of a survival sample.

    order sorts subjects by time ascending (stable). Subjects sharing a time
    form a tie group; group_of[p] is the group of sorted position p and
    group_start[g] is the first sorted position of group g. The risk set of a
    subject at sorted position p is every sorted position >= group_start[group_of[p]].
    """

    order: np.ndarray
    time: np.ndarray
    event: np.ndarray
    group_of: np.ndarray
    group_start: np.ndarray

    @property
    def num_subjects(self) -> int:
        return self.order.shape[0]

    @property
    def event_positions(self) -> np.ndarray:
        """Original indices of subjects with an observed event."""
        return np.flatnonzero(self.event)

    @property
    def tie_groups(self) -> List[np.ndarray]:
        """Original indices of each group of equal times, in time order."""
        bounds = np.append(self.group_start, self.num_subjects)
        return [self.order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    @property
    def group_times(self) -> np.ndarray:
        return self.time[self.order[self.group_start]]

    @property
    def group_events(self) -> np.ndarray:
        """Number of events in each tie group."""
        return np.bincount(self.group_of, weights=self.event[self.order].astype(float),
                           minlength=self.group_start.shape[0])

    def risk_set(self, i: int) -> np.ndarray:
        """Original indices of R(t_i)."""
        return np.flatnonzero(self.time >= self.time[i])


def build_risk_index(time: np.ndarray, event: np.ndarray) -> RiskSetIndex:
    time = np.asarray(time, dtype=float).reshape(-1)
    event = np.asarray(event).astype(bool).reshape(-1)
    if time.shape[0] == 0:
        raise InputError("Cannot index an empty sample")
    if time.shape != event.shape:
        raise InputError(f"time and event lengths differ: {time.shape[0]} vs {event.shape[0]}")
    if not np.all(np.isfinite(time)) or np.any(time <= 0):
        raise InputError("Observed times must be finite and positive")
    order = np.argsort(time, kind="mergesort")
    sorted_time = time[order]
    new_group = np.empty(sorted_time.shape[0], dtype=bool)
    new_group[0] = True
    new_group[1:] = sorted_time[1:] != sorted_time[:-1]
    group_of = np.cumsum(new_group) - 1
    group_start = np.flatnonzero(new_group)
    return RiskSetIndex(order=order, time=time, event=event, group_of=group_of, group_start=group_start)


def _check_scores(scores: np.ndarray, idx: RiskSetIndex) -> np.ndarray:
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.shape[0] != idx.num_subjects:
        raise InputError(f"Got {scores.shape[0]} scores for {idx.num_subjects} subjects")
    if not np.all(np.isfinite(scores)):
        raise InputError("Scores must be finite")
    return scores


def _group_log_denominators(scores: np.ndarray, idx: RiskSetIndex) -> np.ndarray:
    """log sum_{j in R(t_g)} exp(f_j) for every tie group g."""
    sorted_scores = scores[idx.order]
    reverse_lse = np.logaddexp.accumulate(sorted_scores[::-1])[::-1]
    return reverse_lse[idx.group_start]


def log_partial_likelihood(scores: np.ndarray, idx: RiskSetIndex) -> float:
    scores = _check_scores(scores, idx)
    log_denoms = _group_log_denominators(scores, idx)
    events = idx.event
    subject_denoms = np.empty_like(scores)
    subject_denoms[idx.order] = log_denoms[idx.group_of]
    return float(np.sum(scores[events] - subject_denoms[events]))


def log_partial_likelihood_grad(scores: np.ndarray, idx: RiskSetIndex) -> np.ndarray:
    """
    d ll / d f_j = delta_j - exp(f_j) * sum_{events i with t_i <= t_j} 1 / sum_{k in R(t_i)} exp(f_k).

    The inner cumulative sum is carried in log space over tie groups.
    """
    scores = _check_scores(scores, idx)
    log_denoms = _group_log_denominators(scores, idx)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_increments = np.log(idx.group_events) - log_denoms
        log_cumulative = np.logaddexp.accumulate(log_increments)
    subject_log_cum = np.empty_like(scores)
    subject_log_cum[idx.order] = log_cumulative[idx.group_of]
    return idx.event.astype(float) - np.exp(scores + subject_log_cum)


@dataclass(frozen=True, eq=False)
class BreslowBaseline:
    """Step function of the cumulative baseline hazard at distinct event times."""

    times: np.ndarray
    cum_hazard: np.ndarray

    def cumulative_hazard(self, t) -> np.ndarray:
        """H0(t), right-continuous; zero before the first event time."""
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="right") - 1
        return np.where(pos >= 0, self.cum_hazard[np.maximum(pos, 0)], 0.0)


def breslow_baseline(scores: np.ndarray, idx: RiskSetIndex) -> BreslowBaseline:
    scores = _check_scores(scores, idx)
    counts = idx.group_events
    if counts.sum() == 0:
        raise InputError("Baseline hazard is undefined without any event")
    log_denoms = _group_log_denominators(scores, idx)
    has_event = counts > 0
    increments = counts[has_event] * np.exp(-log_denoms[has_event])
    return BreslowBaseline(times=idx.group_times[has_event], cum_hazard=np.cumsum(increments))


def predict_survival(score, base: BreslowBaseline, t) -> np.ndarray:
    """
    S(t | x) = exp(-H0(t) * exp(score)).

    score and t broadcast against each other; scalars give a 0-d result.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InputError("Prediction times must be non-negative")
    hazard = base.cumulative_hazard(t)
    return np.exp(-hazard * np.exp(np.asarray(score, dtype=float)))


@dataclass(frozen=True, eq=False)
class LinearCphFit:
    """Result of a Newton-Raphson fit of h(t|x) = h0(t) exp(beta x)."""

    beta: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    standard_errors: np.ndarray


def _linear_cph_derivatives(X: np.ndarray, beta: np.ndarray, idx: RiskSetIndex) -> Tuple[float, np.ndarray, np.ndarray]:
    """Log-partial likelihood, its gradient and Hessian in beta (Breslow ties)."""
    eta = X @ beta
    ll = log_partial_likelihood(eta, idx)
    grad = X.T @ log_partial_likelihood_grad(eta, idx)

    order = idx.order
    Xs = X[order]
    w = np.exp(eta[order] - eta.max())
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]
    s2 = np.cumsum((w[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[::-1], axis=0)[::-1]
    start = idx.group_start
    d = idx.group_events
    mean = s1[start] / s0[start][:, None]
    second = s2[start] / s0[start][:, None, None]
    cov = second - mean[:, :, None] * mean[:, None, :]
    hess = -np.einsum("g,gij->ij", d, cov)
    return ll, grad, hess


def _newton_step_norm(hess: np.ndarray, grad: np.ndarray) -> float:
    try:
        return float(np.linalg.norm(np.linalg.solve(-hess, grad)))
    except np.linalg.LinAlgError:
        return np.inf


def fit_linear_cph(
    X: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    max_halvings: int = 30,
) -> LinearCphFit:
    """
    Fit the linear Cox model by damped Newton-Raphson from beta = 0.

    Args:
        X: Covariates (n, V).
        time: Observed times (n,).
        event: Event indicators (n,).
        tol: Convergence threshold on the largest score-equation component.
        max_iter: Maximum number of Newton iterations.
        max_halvings: Maximum step halvings per iteration.

    Returns:
        LinearCphFit: Coefficients, convergence flag, iteration count,
        final log-partial likelihood and standard errors.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("fit_linear_cph needs a matrix with at least two rows")
    idx = build_risk_index(time, event)
    if X.shape[0] != idx.num_subjects:
        raise InputError("X rows and time length differ")
    if not idx.event.any():
        raise InputError("fit_linear_cph needs at least one event")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ConfigurationError("Design matrix is rank deficient")

    beta = np.zeros(X.shape[1])
    ll, grad, hess = _linear_cph_derivatives(X, beta, idx)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            converged = True
            iterations -= 1
            break
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            logger.warning("Singular information matrix in Newton step")
            break
        step = 1.0
        for _ in range(max_halvings + 1):
            candidate = beta + step * delta
            eta = X @ candidate
            cand_ll = log_partial_likelihood(eta, idx) if np.all(np.isfinite(eta)) else -np.inf
            if cand_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step *= 0.5
        else:
            logger.warning(f"Step halving failed at iteration {iterations}")
            break
        beta = candidate
        ll, grad, hess = _linear_cph_derivatives(X, beta, idx)
        logger.debug(f"Newton iteration {iterations}: ll={ll:.8f}, max|score|={np.max(np.abs(grad)):.3e}")
    else:
        converged = bool(np.max(np.abs(grad)) < tol)

    if converged:
        step_norm = _newton_step_norm(hess, grad)
        if step_norm > SEPARATION_STEP_NORM:
            # score vanishes only because beta diverges
            logger.warning(
                f"Score vanished but the Newton step is still {step_norm:.3f}; the data look separated, "
                f"beta={beta.tolist()}"
            )
            converged = False

    if not converged:
        logger.warning(f"Linear CPH did not converge after {iterations} iterations")
    try:
        se = np.sqrt(np.diag(np.linalg.inv(-hess)))
    except np.linalg.LinAlgError:
        se = np.full(beta.shape, np.nan)
    return LinearCphFit(beta=beta, converged=converged, iterations=iterations, log_likelihood=ll, standard_errors=se)
