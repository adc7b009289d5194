"""
Module for training the spline log-risk model.

The training objective is

    loss = -ll(Phi) + gamma * (mu1 * ||Phi||_1 + mu2 * H(Phi))

where ll is the Breslow log-partial likelihood, ||Phi||_1 is the sum over
activations of the mean absolute activation output on the training set and
H is the entropy of the normalized per-activation L1 norms. The gradient is
assembled by the chain rule through the per-activation outputs and the full
batch is optimized with Adam.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from src.components.cox_engine import RiskSetIndex, build_risk_index, log_partial_likelihood, log_partial_likelihood_grad
from src.components.errors import ConfigurationError, InputError, NumericalAbort
from src.components.kan_model import (
    DesignCache,
    GcphModel,
    flatten_params,
    unflatten_params,
    with_centering,
)
from src.components.spline_core import Activation, grid_from_data

TRAIN_LOG_COLUMNS = ["step", "nll", "l1", "entropy", "total"]


@dataclass(frozen=True)
class RegConfig:
    """Regularization weights."""

    mu1: float = 1.0
    mu2: float = 10.0
    gamma: float = 0.1

    def __post_init__(self):
        for name in ("mu1", "mu2", "gamma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ConfigurationError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class TrainConfig:
    """Grid shape, optimizer settings and initialization of one training run."""

    num_intervals: int = 5
    order: int = 3
    learning_rate: float = 0.01
    max_steps: int = 2000
    seed: int = 0
    linear_only: bool = False
    init_coeff_sd: float = 0.1
    log_every: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be a positive integer, got {self.max_steps}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not (np.isfinite(self.init_coeff_sd) and self.init_coeff_sd >= 0):
            raise ConfigurationError(f"init_coeff_sd must be non-negative, got {self.init_coeff_sd}")
        if self.num_intervals < 1 or self.order < 1:
            raise ConfigurationError("num_intervals and order must be positive")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be positive")


class LossParts(NamedTuple):
    nll: float
    l1: float
    entropy: float


@dataclass
class TrainLogEntry:
    step: int
    nll: float
    l1: float
    entropy: float
    total: float


@dataclass
class TrainLog:
    """Loss trajectory of one run plus the selected iterate."""

    seed: int
    entries: List[TrainLogEntry] = field(default_factory=list)
    best_step: int = 0
    best_loss: float = float("inf")

    def append(self, step: int, total: float, parts: LossParts):
        self.entries.append(TrainLogEntry(step, parts.nll, parts.l1, parts.entropy, total))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(e) for e in self.entries], columns=TRAIN_LOG_COLUMNS)

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path


def l1_norm_per_activation(m: GcphModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("L1 norms need a nonempty batch")
    cache = DesignCache(m, X)
    return np.abs(cache.activation_matrix(flatten_params(m))).mean(axis=0)


def entropy_loss(l1s: np.ndarray) -> float:
    l1s = np.asarray(l1s, dtype=float)
    if np.any(l1s < 0):
        raise InputError("L1 norms must be non-negative")
    total = l1s.sum()
    if total == 0:
        return 0.0
    p = l1s[l1s > 0] / total
    return float(-np.sum(p * np.log(p)))


def _entropy_grad(l1s: np.ndarray) -> np.ndarray:
    """
    dH/dl_v = -(ln p_v + H) / L with L the total norm.

    Entries with l_v = 0 get 0 (the derivative is unbounded there).
    """
    total = l1s.sum()
    grad = np.zeros_like(l1s)
    if total == 0:
        return grad
    positive = l1s > 0
    h = entropy_loss(l1s)
    grad[positive] = -(np.log(l1s[positive] / total) + h) / total
    return grad


class LossEvaluator:
    """Total loss and its gradient over a fixed training design."""

    def __init__(self, template: GcphModel, X: np.ndarray, idx: RiskSetIndex, cfg: RegConfig):
        self.cache = DesignCache(template, X)
        self.idx = idx
        self.cfg = cfg
        if self.cache.num_rows != idx.num_subjects:
            raise InputError(f"X has {self.cache.num_rows} rows but the index has {idx.num_subjects} subjects")
        if self.cache.num_rows == 0:
            raise InputError("Cannot evaluate the loss on an empty batch")

    def _value(self, phi: np.ndarray) -> Tuple[float, LossParts]:
        nll = -log_partial_likelihood(phi.sum(axis=1), self.idx)
        l1s = np.abs(phi).mean(axis=0)
        l1 = float(l1s.sum())
        entropy = entropy_loss(l1s)
        total = nll + self.cfg.gamma * (self.cfg.mu1 * l1 + self.cfg.mu2 * entropy)
        return total, LossParts(nll, l1, entropy)

    def value(self, theta: np.ndarray) -> Tuple[float, LossParts]:
        return self._value(self.cache.activation_matrix(theta))

    def value_and_grad(self, theta: np.ndarray) -> Tuple[float, LossParts, np.ndarray]:
        phi = self.cache.activation_matrix(theta)
        total, parts = self._value(phi)
        if not np.isfinite(total):
            return total, parts, np.full_like(theta, np.nan)
        score_grad = log_partial_likelihood_grad(phi.sum(axis=1), self.idx)
        weights = np.repeat(-score_grad[:, None], phi.shape[1], axis=1)
        if self.cfg.gamma > 0:
            l1s = np.abs(phi).mean(axis=0)
            per_norm = self.cfg.mu1 + self.cfg.mu2 * _entropy_grad(l1s)
            weights += self.cfg.gamma * per_norm[None, :] * np.sign(phi) / phi.shape[0]
        return total, parts, self.cache.pullback(theta, weights)


def total_loss(m: GcphModel, X: np.ndarray, idx: RiskSetIndex, cfg: RegConfig) -> Tuple[float, LossParts]:
    return LossEvaluator(m, X, idx, cfg).value(flatten_params(m))


def total_loss_grad(m: GcphModel, X: np.ndarray, idx: RiskSetIndex, cfg: RegConfig) -> np.ndarray:
    """Gradient of total_loss in the flat parameter layout (L1 uses sign(0) = 0)."""
    return LossEvaluator(m, X, idx, cfg).value_and_grad(flatten_params(m))[2]


class AdamOptimizer:
    """Full-batch Adam over one flat parameter vector."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def initial_model(
    X: np.ndarray,
    cfg: TrainConfig,
    feature_names: Optional[Sequence[str]] = None,
    standardization: Optional[Sequence[Tuple[float, float]]] = None,
) -> GcphModel:
    """
    Seeded starting point: omega_b = 1, omega_s = 1, coeffs ~ N(0, init_coeff_sd).

    In linear-only mode the basis is the identity and the spline part is
    switched off (omega_s = 0, coeffs = 0).
    """
    X = np.asarray(X, dtype=float)
    num_features = X.shape[1]
    rng = np.random.default_rng(cfg.seed)
    grids = [grid_from_data(X[:, v], cfg.num_intervals, cfg.order) for v in range(num_features)]
    num_basis = grids[0].num_basis
    coeffs = rng.normal(0.0, cfg.init_coeff_sd, size=(num_features, num_basis))
    activations = []
    for v, grid in enumerate(grids):
        if cfg.linear_only:
            activations.append(Activation(1.0, 0.0, np.zeros(num_basis), grid, basis="identity"))
        else:
            activations.append(Activation(1.0, 1.0, coeffs[v], grid))
    if feature_names is None:
        feature_names = [f"x{v + 1}" for v in range(num_features)]
    return GcphModel(tuple(activations), tuple(feature_names), 0.0, standardization)


def _trainable_mask(template: GcphModel) -> np.ndarray:
    mask = np.ones(template.num_params)
    for a, sl in zip(template.activations, template.param_slices):
        if a.basis == "identity" and a.omega_s == 0.0:
            mask[sl.start + 1 : sl.stop] = 0.0
    return mask


def train(
    X: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    train_cfg: TrainConfig = TrainConfig(),
    reg_cfg: RegConfig = RegConfig(),
    feature_names: Optional[Sequence[str]] = None,
    standardization: Optional[Sequence[Tuple[float, float]]] = None,
) -> Tuple[GcphModel, TrainLog]:
    """
    Train one model by full-batch Adam and return the best iterate.

    Args:
        X: Standardized covariates (n, V).
        time: Observed times (n,).
        event: Event indicators (n,).
        train_cfg: Grid, optimizer and seed settings.
        reg_cfg: Regularization weights.
        feature_names: Optional names stored in the model.
        standardization: Optional (mean, sd) pairs stored in the model.

    Returns:
        Tuple[GcphModel, TrainLog]: The centered best-loss model and its log.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("Training needs at least two records")
    idx = build_risk_index(time, event)
    if not idx.event.any():
        raise InputError("Training needs at least one event")

    template = initial_model(X, train_cfg, feature_names, standardization)
    evaluator = LossEvaluator(template, X, idx, reg_cfg)
    mask = _trainable_mask(template)
    optimizer = AdamOptimizer(lr=train_cfg.learning_rate)
    theta = flatten_params(template)
    log = TrainLog(seed=train_cfg.seed)
    best_theta = theta.copy()

    mode = "linear-only" if train_cfg.linear_only else "spline"
    logger.info(
        f"Training {mode} model: n={X.shape[0]}, V={X.shape[1]}, steps={train_cfg.max_steps}, seed={train_cfg.seed}"
    )

    for step in range(train_cfg.max_steps + 1):
        # The final pass only scores the last iterate
        if step < train_cfg.max_steps:
            loss, parts, grad = evaluator.value_and_grad(theta)
        else:
            loss, parts = evaluator.value(theta)
        if not np.isfinite(loss):
            logger.error(f"Non-finite loss at step {step}: {parts}")
            raise NumericalAbort(
                f"Training aborted at step {step}: loss={loss}, nll={parts.nll}, l1={parts.l1}, entropy={parts.entropy}"
            )
        # Record the loss and keep the best iterate
        if step % train_cfg.log_every == 0 or step == train_cfg.max_steps:
            log.append(step, loss, parts)
        if loss < log.best_loss:
            log.best_loss = float(loss)
            log.best_step = step
            best_theta = theta.copy()
        # Adam update on the trainable entries
        if step < train_cfg.max_steps:
            theta = optimizer.step(theta, grad * mask)

    # Center the best model on the training rows
    model = unflatten_params(template, best_theta)
    offset = float(evaluator.cache.activation_matrix(best_theta).sum(axis=1).mean())
    model = with_centering(model, offset)
    logger.info(f"Best loss {log.best_loss:.6f} at step {log.best_step} (seed={train_cfg.seed})")
    return model, log


def train_multi_seed(
    X: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    train_cfg: TrainConfig,
    reg_cfg: RegConfig,
    seeds: Sequence[int],
    workers: int = 1,
    feature_names: Optional[Sequence[str]] = None,
    standardization: Optional[Sequence[Tuple[float, float]]] = None,
) -> List[Tuple[GcphModel, TrainLog]]:
    """Independent runs, one per seed, returned in the order of seeds."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigurationError("At least one seed is required")

    def run(seed: int) -> Tuple[GcphModel, TrainLog]:
        return train(X, time, event, replace(train_cfg, seed=seed), reg_cfg, feature_names, standardization)

    if workers <= 1:
        return [run(seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, seeds))
