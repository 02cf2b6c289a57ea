"""
Shared fixtures: small models, grids and problem configs that solve in well
under a second, plus helpers for writing configs to a temporary directory.
"""

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import DensityMode, Diffusion, DiffusionModel, Drift, PowerDensity
from dynkin_vi.obstacle import PenaltyConfig

PROBLEMS_DIR = Path(__file__).resolve().parent.parent / "problems"

RATE = 0.06
VOLATILITY = 0.2
STRIKE = 1.0


def brownian(dim=1, sigma=1.0, drift=0.0, alpha=0.1, mode=DensityMode.CLOSED_FORM):
    """Brownian motion with constant drift; diffusion sigma * identity."""
    return DiffusionModel(
        dim,
        Drift("constant", (float(drift),) * dim, (0.0,) * dim),
        Diffusion("constant", matrix=tuple(tuple(sigma if i == j else 0.0 for j in range(dim)) for i in range(dim))),
        alpha,
        mode,
    )


def gbm(rate=RATE, volatility=VOLATILITY, alpha=RATE):
    """Geometric Brownian motion with the power density that symmetrizes it."""
    exponent = 2.0 * (rate - volatility**2) / volatility**2
    return DiffusionModel(
        1,
        Drift("geometric", (0.0,), (rate,)),
        Diffusion("geometric", offset=(0.0,), slope=(volatility,)),
        alpha,
        DensityMode.USER,
        PowerDensity((exponent,)),
    )


def put_field(grid, strike=STRIKE):
    return ScalarField.from_function(grid, lambda t, x: np.maximum(strike - x[:, 0], 0.0))


@pytest.fixture
def fine_penalty():
    return PenaltyConfig(eps_schedule=(1e-2, 1e-4, 1e-6, 1e-8))


@pytest.fixture
def line_grid():
    return SpaceTimeGrid.uniform(1.0, 20, [(-1.0, 1.0, 41)])


@pytest.fixture
def put_grid():
    return SpaceTimeGrid.uniform(1.0, 50, [(0.2, 3.0, 141)])


@pytest.fixture
def plane_grid():
    return SpaceTimeGrid.uniform(0.5, 10, [(0.0, 2.0, 11), (0.0, 2.0, 11)])


def load_problem_spec(name):
    return json.loads((PROBLEMS_DIR / f"{name}.json").read_text(encoding="utf-8"))


@pytest.fixture
def small_put_spec():
    """The shipped put config on a coarse grid with a small Monte Carlo budget."""
    spec = copy.deepcopy(load_problem_spec("put"))
    spec["grid"] = {"t_max": 1.0, "t_steps": 40, "axes": [{"min": 0.2, "max": 3.0, "nodes": 57}]}
    spec["mc"].update(n_paths=4000, block_size=1000, vi_trials=10, scheme_constant=0.1)
    spec["mc"]["start_points"] = [{"t": 0.0, "x": [1.0]}]
    return spec


@pytest.fixture
def write_config(tmp_path):
    def write(spec, name="problem.json"):
        path = tmp_path / name
        path.write_text(json.dumps(spec), encoding="utf-8")
        return path

    return write
