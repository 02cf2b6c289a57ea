"""
Projected successive over-relaxation for the discrete complementarity
problems, used as an independent check on the penalty solver.

Per backward time step, find lower <= u <= upper with (A u - b)_i = 0 where
the bounds are slack, >= 0 where u_i = lower_i and <= 0 where u_i = upper_i.
Nodes are swept red then black; a 5-point stencil only couples nodes of
opposite colour, so each half-sweep is an exact vectorized Gauss-Seidel pass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from dynkin_vi import constants
from dynkin_vi.constants import ConfigError, RelaxationDivergence, setting
from dynkin_vi.forms import operators_for
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import DiffusionModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelaxationConfig:
    omega: float = field(default_factory=lambda: float(constants.Oracle.omega))
    tol: float = field(default_factory=lambda: float(constants.Oracle.tol))
    max_sweeps: int = field(default_factory=lambda: int(constants.Oracle.max_sweeps))

    def __post_init__(self):
        for name, kind in (("omega", float), ("tol", float), ("max_sweeps", int)):
            object.__setattr__(self, name, setting(f"oracle.{name}", getattr(self, name), kind))
        if not 0.0 < self.omega < 2.0:
            raise ConfigError("oracle.omega", f"relaxation factor must lie in (0, 2), got {self.omega}")


def projected_relaxation(
    matrix: sp.csr_matrix,
    rhs: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    parity: np.ndarray,
    guess: np.ndarray | None = None,
    cfg: RelaxationConfig | None = None,
) -> tuple[np.ndarray, int]:
    """Solve one box-constrained complementarity problem; returns (u, sweeps)."""
    cfg = cfg or RelaxationConfig()
    matrix = sp.csr_matrix(matrix)
    diag = matrix.diagonal()
    u = np.clip(rhs / diag if guess is None else np.asarray(guess, dtype=float), lower, upper)
    colours = [np.flatnonzero(parity == c) for c in (0, 1)]
    blocks = [matrix[idx] for idx in colours]
    for sweep in range(1, cfg.max_sweeps + 1):
        change = 0.0
        for idx, block in zip(colours, blocks):
            if idx.size == 0:
                continue
            residual = rhs[idx] - block @ u
            new = np.clip(u[idx] + cfg.omega * residual / diag[idx], lower[idx], upper[idx])
            change = max(change, float(np.max(np.abs(new - u[idx]))))
            u[idx] = new
        if change < cfg.tol:
            return u, sweep
    raise RelaxationDivergence(f"projected relaxation did not converge in {cfg.max_sweeps} sweeps (last change {change:.3e})")


def complementarity_residual(
    matrix: sp.csr_matrix, rhs: np.ndarray, u: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> float:
    """Natural residual max |u - clip(u - (A u - b) / diag, lower, upper)|; zero exactly at a solution."""
    matrix = sp.csr_matrix(matrix)
    step = (matrix @ u - rhs) / matrix.diagonal()
    return float(np.max(np.abs(u - np.clip(u - step, lower, upper)))) if u.size else 0.0


def relaxation_march(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    lower: ScalarField,
    upper: ScalarField | None,
    alpha: float,
    data: np.ndarray,
    source: ScalarField | None = None,
    cfg: RelaxationConfig | None = None,
) -> ScalarField:
    """
    Fitted implicit march where every implicit step is a box-constrained
    complementarity problem. `data` supplies the values at the horizon and
    on the spatial boundary.
    """
    cfg = cfg or RelaxationConfig()
    operators = operators_for(model, grid)
    interior, boundary = grid.interior, grid.boundary
    parity = grid.parity[interior]
    hi = np.full(lower.values.shape, np.inf) if upper is None else upper.values
    u = np.empty((grid.n_time, grid.n_space))
    u[-1] = data[-1]
    total = 0
    for k in range(grid.n_time - 2, -1, -1):
        dt = float(grid.dt[k])
        system = operators[k].implicit_system(dt, alpha, grid)
        u[k, boundary] = data[k, boundary]
        rhs = system.mass * u[k + 1, interior] / system.step - system.coupling @ u[k, boundary]
        if source is not None:
            rhs += system.mass * source.values[k, interior]
        try:
            u[k, interior], sweeps = projected_relaxation(
                system.matrix, rhs, lower.values[k, interior], hi[k, interior], parity, u[k + 1, interior], cfg
            )
        except RelaxationDivergence as e:
            raise RelaxationDivergence(f"slice {k}: {e}") from None
        total += sweeps
        log.debug(f"slice {k}: relaxation converged in {sweeps} sweeps")
    log.info(f"Relaxation march finished: {total} sweeps over {grid.n_time - 1} steps")
    return ScalarField(grid, u)


def psor_obstacle(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    g: ScalarField,
    alpha: float,
    source: ScalarField | None = None,
    cfg: RelaxationConfig | None = None,
) -> ScalarField:
    """One-obstacle problem u >= g by relaxation, with the same killed data as the penalty solver."""
    return relaxation_march(model, grid, g, None, alpha, np.maximum(g.values, 0.0), source, cfg)
