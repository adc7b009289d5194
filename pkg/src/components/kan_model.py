"""
Module for the single-layer KAN log-risk function.

f(x) = sum_v phi_v(x_v) - centering_offset, with one learnable activation per
covariate. The model also remembers the standardization used at ingestion so
raw rows can be scored without the training data at hand.

PARAMETER LAYOUT:
=================
The flat parameter vector concatenates, per activation in feature order,
[omega_b, omega_s, coeffs[0], ..., coeffs[G+K-1]].

PERSISTENCE:
============
A model is stored as one JSON document with the fields, in order: version,
feature_names, standardization, centering_offset, activations. Floats are
written with their shortest round-trip representation.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from src.components.errors import ConfigurationError, InputError
from src.components.spline_core import Activation, bspline_basis_matrix

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class GcphModel:
    """Additive log-risk model with one activation per covariate."""

    activations: Tuple[Activation, ...]
    feature_names: Tuple[str, ...]
    centering_offset: float = 0.0
    standardization: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        activations = tuple(self.activations)
        if len(activations) < 1:
            raise ConfigurationError("A model needs at least one activation")
        names = tuple(str(n) for n in self.feature_names)
        if len(names) != len(activations):
            raise ConfigurationError(
                f"Got {len(names)} feature names for {len(activations)} activations"
            )
        if self.standardization is None:
            stats = tuple((0.0, 1.0) for _ in activations)
        else:
            stats = tuple((float(mean), float(sd)) for mean, sd in self.standardization)
        if len(stats) != len(activations):
            raise ConfigurationError("Standardization must hold one (mean, sd) pair per feature")
        for name, (mean, sd) in zip(names, stats):
            if not (np.isfinite(mean) and np.isfinite(sd) and sd > 0):
                raise ConfigurationError(f"Invalid standardization for '{name}': mean={mean}, sd={sd}")
        if not np.isfinite(self.centering_offset):
            raise ConfigurationError("centering_offset must be finite")
        object.__setattr__(self, "activations", activations)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "standardization", stats)
        object.__setattr__(self, "centering_offset", float(self.centering_offset))

    @property
    def num_features(self) -> int:
        return len(self.activations)

    @property
    def param_slices(self) -> List[slice]:
        slices, start = [], 0
        for a in self.activations:
            slices.append(slice(start, start + a.num_params))
            start += a.num_params
        return slices

    @property
    def num_params(self) -> int:
        return sum(a.num_params for a in self.activations)

    @property
    def linear_only(self) -> bool:
        return all(a.basis == "identity" and a.omega_s == 0.0 for a in self.activations)


def _check_matrix(m: GcphModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, m.num_features)
    if X.ndim != 2 or X.shape[1] != m.num_features:
        raise InputError(f"Expected a matrix with {m.num_features} columns, got shape {X.shape}")
    return X


class DesignCache:
    """
    Basis evaluations of a fixed design matrix.

    The knot grids never move during training, so the B-spline matrices of the
    training data are computed once and reused for every parameter vector.
    """

    def __init__(self, template: GcphModel, X: np.ndarray):
        X = _check_matrix(template, X)
        self.template = template
        self.num_rows = X.shape[0]
        self.slices = template.param_slices
        self.base = [a.base_values(X[:, v]) for v, a in enumerate(template.activations)]
        self.splines = [
            bspline_basis_matrix(X[:, v], a.grid) for v, a in enumerate(template.activations)
        ]

    def activation_matrix(self, theta: np.ndarray) -> np.ndarray:
        """Raw (uncentered) activation outputs, shape (n, V)."""
        out = np.empty((self.num_rows, len(self.slices)))
        for v, sl in enumerate(self.slices):
            block = theta[sl]
            out[:, v] = block[0] * self.base[v] + block[1] * (self.splines[v] @ block[2:])
        return out

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """Derivative of every row's log-risk with respect to theta, shape (n, P)."""
        jac = np.zeros((self.num_rows, theta.shape[0]))
        for v, sl in enumerate(self.slices):
            block = theta[sl]
            jac[:, sl.start] = self.base[v]
            jac[:, sl.start + 1] = self.splines[v] @ block[2:]
            jac[:, sl.start + 2 : sl.stop] = block[1] * self.splines[v]
        return jac

    def pullback(self, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """
        Vector-Jacobian product for per-activation output weights.

        Args:
            theta: Flat parameter vector.
            weights: Matrix (n, V); entry (i, v) is d(loss)/d(phi_v(x_iv)).

        Returns:
            np.ndarray: Gradient of the loss with respect to theta.
        """
        grad = np.zeros_like(theta)
        for v, sl in enumerate(self.slices):
            block = theta[sl]
            w = weights[:, v]
            grad[sl.start] = self.base[v] @ w
            projected = self.splines[v].T @ w
            grad[sl.start + 1] = block[2:] @ projected
            grad[sl.start + 2 : sl.stop] = block[1] * projected
        return grad


def flatten_params(m: GcphModel) -> np.ndarray:
    parts = []
    for a in m.activations:
        parts.append(np.array([a.omega_b, a.omega_s]))
        parts.append(np.asarray(a.coeffs, dtype=float))
    return np.concatenate(parts)


def unflatten_params(template: GcphModel, theta: np.ndarray) -> GcphModel:
    """Build a model with the grids and metadata of template and the values of theta."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (template.num_params,):
        raise InputError(f"Expected {template.num_params} parameters, got shape {theta.shape}")
    activations = []
    for a, sl in zip(template.activations, template.param_slices):
        block = theta[sl]
        activations.append(
            Activation(omega_b=block[0], omega_s=block[1], coeffs=block[2:].copy(), grid=a.grid, basis=a.basis)
        )
    return replace(template, activations=tuple(activations))


def with_centering(m: GcphModel, offset: float) -> GcphModel:
    return replace(m, centering_offset=offset)


def activation_matrix(m: GcphModel, X: np.ndarray) -> np.ndarray:
    """Per-activation raw outputs phi_v(x_iv), shape (n, V)."""
    return DesignCache(m, X).activation_matrix(flatten_params(m))


def log_risk_batch(m: GcphModel, X: np.ndarray) -> np.ndarray:
    X = _check_matrix(m, X)
    if X.shape[0] == 0:
        return np.zeros(0)
    return activation_matrix(m, X).sum(axis=1) - m.centering_offset


def log_risk(m: GcphModel, x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != m.num_features:
        raise InputError(f"Expected {m.num_features} covariates, got {x.shape[0]}")
    return float(log_risk_batch(m, x.reshape(1, -1))[0])


def log_risk_grad_batch(m: GcphModel, X: np.ndarray) -> np.ndarray:
    X = _check_matrix(m, X)
    return DesignCache(m, X).jacobian(flatten_params(m))


def per_feature_curve(m: GcphModel, v: int, xs: np.ndarray) -> np.ndarray:
    """
    Sweep one feature with all others held at 0 on the standardized scale.

    Returns f(x_v = xs, x_rest = 0), including the centering offset.
    """
    if not 0 <= v < m.num_features:
        raise InputError(f"Feature index {v} out of range for {m.num_features} features")
    xs = np.asarray(xs, dtype=float).reshape(-1)
    X = np.zeros((xs.shape[0], m.num_features))
    X[:, v] = xs
    return log_risk_batch(m, X)


def standardize(m: GcphModel, raw_X: np.ndarray) -> np.ndarray:
    """Map raw (encoded) covariates to the scale the model was trained on."""
    raw_X = _check_matrix(m, raw_X)
    means = np.array([mean for mean, _ in m.standardization])
    sds = np.array([sd for _, sd in m.standardization])
    return (raw_X - means) / sds


def per_feature_curve_raw(m: GcphModel, v: int, raw_xs: np.ndarray) -> np.ndarray:
    """per_feature_curve with the swept feature given in raw units."""
    if not 0 <= v < m.num_features:
        raise InputError(f"Feature index {v} out of range for {m.num_features} features")
    mean, sd = m.standardization[v]
    return per_feature_curve(m, v, (np.asarray(raw_xs, dtype=float) - mean) / sd)


def raw_scale_slopes(m: GcphModel) -> np.ndarray:
    """Slopes of a linear-only model per raw covariate unit."""
    if not m.linear_only:
        raise InputError("Slopes are only defined for linear-only models")
    return np.array([a.omega_b / sd for a, (_, sd) in zip(m.activations, m.standardization)])


def model_to_dict(m: GcphModel) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "feature_names": list(m.feature_names),
        "standardization": [{"mean": mean, "sd": sd} for mean, sd in m.standardization],
        "centering_offset": m.centering_offset,
        "activations": [a.to_dict() for a in m.activations],
    }


def model_from_dict(payload: dict) -> GcphModel:
    version = payload.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"Unsupported model format version: {version}")
    return GcphModel(
        activations=tuple(Activation.from_dict(a) for a in payload["activations"]),
        feature_names=tuple(payload["feature_names"]),
        centering_offset=payload["centering_offset"],
        standardization=tuple((s["mean"], s["sd"]) for s in payload["standardization"]),
    )


def model_to_json(m: GcphModel) -> str:
    return json.dumps(model_to_dict(m), indent=2) + "\n"


def model_from_json(text: str) -> GcphModel:
    return model_from_dict(json.loads(text))


def save_model(m: GcphModel, path) -> Path:
    path = Path(path)
    path.write_text(model_to_json(m), encoding="utf-8")
    logger.info(f"Model written to {path}")
    return path


def load_model(path) -> GcphModel:
    path = Path(path)
    try:
        return model_from_json(path.read_text(encoding="utf-8"))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Malformed model file {path}: {e}") from e
