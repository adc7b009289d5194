"""
Module for B-spline bases and the learnable per-covariate activation.

An activation is phi(x) = omega_b * b(x) + omega_s * sum_k c_k * B_k(x), where
b is the fixed basis function and B_k are the B-splines of a uniform knot grid.

KNOT GRID:
==========
A grid with G intervals on [lo, hi] and order K has G + 2K + 1 knots: the G + 1
interior knots plus K knots on each side continuing the same spacing. It
carries G + K basis functions, which sum to one anywhere in [lo, hi]. Inputs
outside [lo, hi] are evaluated against the extended knots without clamping.
"""

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy.special import expit

from src.components.errors import ConfigurationError, InputError

ArrayLike = Union[float, np.ndarray]

BASIS_KINDS = ("silu", "identity")


@dataclass(frozen=True)
class KnotGrid:
    """Uniform knot grid of one covariate."""

    lo: float
    hi: float
    num_intervals: int = 5
    order: int = 3

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ConfigurationError(f"Grid bounds must be finite, got [{self.lo}, {self.hi}]")
        if not self.lo < self.hi:
            raise ConfigurationError(f"Grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.num_intervals) != self.num_intervals or self.num_intervals < 1:
            raise ConfigurationError(f"num_intervals must be a positive integer, got {self.num_intervals}")
        if int(self.order) != self.order or self.order < 1:
            raise ConfigurationError(f"order must be a positive integer, got {self.order}")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / self.num_intervals

    @property
    def num_basis(self) -> int:
        return self.num_intervals + self.order

    @property
    def knots(self) -> np.ndarray:
        steps = np.arange(-self.order, self.num_intervals + self.order + 1)
        return self.lo + steps * self.spacing

    def to_dict(self) -> dict:
        return {
            "lo": float(self.lo),
            "hi": float(self.hi),
            "num_intervals": int(self.num_intervals),
            "order": int(self.order),
        }


def grid_from_data(values: np.ndarray, num_intervals: int = 5, order: int = 3) -> KnotGrid:
    """
    Place a grid over the observed range of one training column.

    The range is widened by 1% on each side. A constant column gets the
    unit-wide grid centred on its value.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ConfigurationError("Cannot place a grid over an empty column")
    vmin, vmax = float(values.min()), float(values.max())
    if vmin == vmax:
        return KnotGrid(vmin - 0.5, vmin + 0.5, num_intervals, order)
    margin = 0.01 * (vmax - vmin)
    return KnotGrid(vmin - margin, vmax + margin, num_intervals, order)


def bspline_basis_matrix(xs: np.ndarray, grid: KnotGrid) -> np.ndarray:
    """
    Evaluate all B-splines of a grid at many points (Cox-de Boor recursion).

    Args:
        xs: Points to evaluate, any shape; flattened.
        grid: The knot grid.

    Returns:
        np.ndarray: Matrix of shape (len(xs), G + K).
    """
    x = np.asarray(xs, dtype=float).reshape(-1, 1)
    t = grid.knots
    bases = ((x >= t[:-1]) & (x < t[1:])).astype(float)
    for p in range(1, grid.order + 1):
        left = (x - t[: -(p + 1)]) / (t[p:-1] - t[: -(p + 1)]) * bases[:, :-1]
        right = (t[p + 1 :] - x) / (t[p + 1 :] - t[1:-p]) * bases[:, 1:]
        bases = left + right
    return bases


def bspline_basis(x: float, grid: KnotGrid) -> np.ndarray:
    """Evaluate the G + K B-splines of a grid at a single point."""
    if not np.isfinite(x):
        raise InputError(f"B-spline input must be finite, got {x}")
    return bspline_basis_matrix(np.array([x]), grid)[0]


def basis_fn(x: ArrayLike) -> ArrayLike:
    """The fixed basis function b(x) = x / (1 + exp(-x))."""
    return x * expit(x)


@dataclass(frozen=True, eq=False)
class Activation:
    """Learnable univariate function of one covariate."""

    omega_b: float
    omega_s: float
    coeffs: np.ndarray
    grid: KnotGrid
    basis: str = field(default="silu")

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if coeffs.shape[0] != self.grid.num_basis:
            raise ConfigurationError(
                f"Activation needs {self.grid.num_basis} coefficients, got {coeffs.shape[0]}"
            )
        if not (np.isfinite(self.omega_b) and np.isfinite(self.omega_s) and np.all(np.isfinite(coeffs))):
            raise ConfigurationError("Activation parameters must be finite")
        if self.basis not in BASIS_KINDS:
            raise ConfigurationError(f"Unknown basis kind '{self.basis}', expected one of {BASIS_KINDS}")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "omega_b", float(self.omega_b))
        object.__setattr__(self, "omega_s", float(self.omega_s))

    @property
    def num_params(self) -> int:
        return 2 + self.grid.num_basis

    def base_values(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if self.basis == "identity":
            return xs.copy()
        return basis_fn(xs)

    def to_dict(self) -> dict:
        return {
            "omega_b": self.omega_b,
            "omega_s": self.omega_s,
            "coeffs": [float(c) for c in self.coeffs],
            "grid": self.grid.to_dict(),
            "basis": self.basis,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Activation":
        return cls(
            omega_b=payload["omega_b"],
            omega_s=payload["omega_s"],
            coeffs=np.asarray(payload["coeffs"], dtype=float),
            grid=KnotGrid(**payload["grid"]),
            basis=payload.get("basis", "silu"),
        )


def activation_values(a: Activation, xs: np.ndarray) -> np.ndarray:
    """Vectorized activation_eval over a 1-D array of inputs."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    spline = bspline_basis_matrix(xs, a.grid) @ a.coeffs
    return a.omega_b * a.base_values(xs) + a.omega_s * spline


def activation_eval(a: Activation, x: float) -> float:
    return float(activation_values(a, np.array([x]))[0])


def activation_grad_matrix(a: Activation, xs: np.ndarray) -> np.ndarray:
    """
    Parameter gradients of an activation at many inputs.

    Returns:
        np.ndarray: Shape (len(xs), 2 + G + K), columns ordered as
        omega_b, omega_s, coeffs[0..G+K).
    """
    xs = np.asarray(xs, dtype=float).reshape(-1)
    basis = bspline_basis_matrix(xs, a.grid)
    grad = np.empty((xs.shape[0], a.num_params))
    grad[:, 0] = a.base_values(xs)
    grad[:, 1] = basis @ a.coeffs
    grad[:, 2:] = a.omega_s * basis
    return grad


def activation_grad(a: Activation, x: float) -> Tuple[float, float, np.ndarray]:
    row = activation_grad_matrix(a, np.array([x]))[0]
    return float(row[0]), float(row[1]), row[2:].copy()
