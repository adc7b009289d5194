import numpy as np
import pytest

from src.components.datasets import SyntheticConfig, generate_synthetic
from src.components.kan_model import GcphModel
from src.components.spline_core import Activation, KnotGrid


def random_activation(rng: np.random.Generator, grid: KnotGrid = KnotGrid(-1.0, 1.0, 5, 3)) -> Activation:
    return Activation(
        omega_b=rng.normal(),
        omega_s=rng.normal(),
        coeffs=rng.normal(0.0, 0.5, grid.num_basis),
        grid=grid,
    )


def random_model(rng: np.random.Generator, num_features: int = 2, centering: float = 0.0) -> GcphModel:
    activations = tuple(random_activation(rng) for _ in range(num_features))
    names = tuple(f"x{v + 1}" for v in range(num_features))
    return GcphModel(activations, names, centering)


def zero_model(num_features: int = 2, grid: KnotGrid = KnotGrid(-1.0, 1.0, 5, 3)) -> GcphModel:
    activations = tuple(Activation(0.0, 0.0, np.zeros(grid.num_basis), grid) for _ in range(num_features))
    return GcphModel(activations, tuple(f"x{v + 1}" for v in range(num_features)))


def random_survival(rng: np.random.Generator, n: int, tie_levels: int = 0, censor_rate: float = 0.3):
    """Random (time, event) with optional ties; at least one event."""
    if tie_levels:
        time = rng.integers(1, tie_levels + 1, size=n).astype(float)
    else:
        time = rng.uniform(0.1, 10.0, size=n)
    event = rng.random(n) >= censor_rate
    event[rng.integers(n)] = True
    return time, event


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def linear_data():
    return generate_synthetic(SyntheticConfig(kind="linear", n=2000, seed=42))


@pytest.fixture(scope="session")
def nonlinear_data():
    return generate_synthetic(SyntheticConfig(kind="nonlinear", n=2000, seed=7))


@pytest.fixture(scope="session")
def large_nonlinear_data():
    return generate_synthetic(SyntheticConfig(kind="nonlinear", n=10000, seed=7))
