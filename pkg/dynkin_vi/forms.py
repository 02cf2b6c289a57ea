"""
Discrete time-dependent Dirichlet forms.

Per time slice the energy E(u, v) = int grad(u) . A grad(v) rho dx is assembled
as a conservative finite-volume stiffness matrix: every edge between
neighbouring nodes carries the coefficient

    c_e = (dual cross-section / h_e^2) * int_e A_dd rho ds

(Gauss-Legendre along the edge), so u^T K u = sum_e c_e (u_i - u_j)^2. Mass is
lumped: m_i = rho(x_i) * |dual cell i|. In `unit` density mode the drift that
rho would have absorbed is added by first-order upwinding, which keeps the
M-matrix property but makes the form unsymmetric.

The implicit backward step over [t_k, t_{k+1}] is exponentially fitted: it
uses tau_k = (exp(alpha dt_k) - 1) / alpha in place of dt_k, so a spatially
constant cost is discounted exactly. The space-time forms attach the slice-k
operators and the difference (u_{k+1} - u_k) / tau_k to that step, the
pairing the march uses.

Operators are cached per grid and released with it.
"""
from __future__ import annotations

import logging
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from dynkin_vi import constants
from dynkin_vi.constants import AssemblyError
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import (
    DensityProvenance,
    DiffusionModel,
    SymmetrizingDensity,
    build_density,
    slice_coefficients,
)

log = logging.getLogger(__name__)

_GAUSS_POINTS, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(4)
_GAUSS_POINTS = 0.5 * (_GAUSS_POINTS + 1.0)
_GAUSS_WEIGHTS = 0.5 * _GAUSS_WEIGHTS

SYMMETRY_TOL = 1e-12


def fitted_step(dt: float, alpha: float) -> float:
    """The step tau with 1 + alpha * tau = exp(alpha * dt); plain dt when alpha is 0."""
    if alpha == 0.0:
        return float(dt)
    return float(np.expm1(alpha * dt) / alpha)


@dataclass(frozen=True)
class ImplicitSystem:
    """
    Interior block of mass*(1/step + alpha) + K and its coupling to the
    boundary. `step` is the fitted tau; the right-hand side of one backward
    step is mass * (u_{k+1} / step + f) - coupling @ boundary values.
    """

    matrix: sp.csr_matrix
    coupling: sp.csr_matrix
    mass: np.ndarray
    step: float


@dataclass(frozen=True, eq=False)
class SliceOperator:
    time_index: int
    stiffness: sp.csr_matrix
    mass: np.ndarray
    symmetric: bool
    _systems: dict = field(default_factory=dict, repr=False)

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        """E(u, v) = -(L u, v); rows of the stiffness act on u."""
        return float(v @ (self.stiffness @ u))

    def implicit_system(self, dt: float, alpha: float, grid: SpaceTimeGrid) -> ImplicitSystem:
        key = (float(dt), float(alpha), grid.n_space)
        if key not in self._systems:
            step = fitted_step(dt, alpha)
            full = (sp.diags(self.mass * (1.0 / step + alpha)) + self.stiffness).tocsr()
            interior, boundary = grid.interior, grid.boundary
            self._systems[key] = ImplicitSystem(
                full[interior][:, interior].tocsr(),
                full[interior][:, boundary].tocsr(),
                self.mass[interior],
                step,
            )
        return self._systems[key]


def _edges(grid: SpaceTimeGrid, axis: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(grid.n_space).reshape(grid.shape)
    lo = np.take(idx, np.arange(grid.shape[axis] - 1), axis=axis).ravel()
    hi = np.take(idx, np.arange(1, grid.shape[axis]), axis=axis).ravel()
    return lo, hi


def assemble_slice(
    model: DiffusionModel, density: SymmetrizingDensity, grid: SpaceTimeGrid, t_index: int
) -> SliceOperator:
    """Stiffness and lumped mass of the Dirichlet form at t_nodes[t_index]."""
    t = float(grid.t_nodes[t_index])
    _, A_nodes = slice_coefficients(model, grid, t_index)
    if grid.dim == 2:
        mixed = float(np.max(np.abs(A_nodes[:, 0, 1])))
        if mixed > SYMMETRY_TOL * (1.0 + float(np.max(np.abs(A_nodes)))):
            raise AssemblyError(
                f"mixed diffusion term A_12 = {mixed:.3e} at t={t:.6g}; the monotone 5-point stencil needs diagonal A"
            )

    rows, cols, vals = [], [], []
    for axis in range(grid.dim):
        lo, hi = _edges(grid, axis)
        h = grid.points[hi, axis] - grid.points[lo, axis]
        cross = np.ones(lo.size)
        for other in range(grid.dim):
            if other != axis:
                cross *= grid.dual_lengths[other][grid.multi_index[lo, other]]
        quad = grid.points[lo][:, None, :].repeat(_GAUSS_POINTS.size, axis=1)
        quad[:, :, axis] += _GAUSS_POINTS[None, :] * h[:, None]
        flat = quad.reshape(-1, grid.dim)
        integrand = model.covariance(t, flat)[:, axis, axis] * density(t, flat)
        integral = h * (integrand.reshape(lo.size, -1) @ _GAUSS_WEIGHTS)
        c = cross * integral / h**2
        rows += [lo, hi, lo, hi]
        cols += [lo, hi, hi, lo]
        vals += [c, c, -c, -c]

    mass = grid.cell_volumes * density(t, grid.points)
    symmetric = True
    if density.provenance is DensityProvenance.UNIT:
        mu = model.generator_drift(t, grid.points)
        if np.any(np.abs(mu[grid.interior]) > 0.0):
            symmetric = False
            _upwind(grid, mu, mass, rows, cols, vals)

    stiffness = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_space, grid.n_space),
    ).tocsr()
    stiffness.sum_duplicates()
    if symmetric:
        asym = abs(stiffness - stiffness.T).max() if stiffness.nnz else 0.0
        if asym > SYMMETRY_TOL * (1.0 + abs(stiffness).max()):
            raise AssemblyError(f"stiffness at slice {t_index} is not symmetric (max asymmetry {asym:.3e})")
    return SliceOperator(t_index, stiffness, mass, symmetric)


def _upwind(grid: SpaceTimeGrid, mu: np.ndarray, mass: np.ndarray, rows, cols, vals) -> None:
    """Add m_i * mu . grad(u) with one-sided differences pointing along the drift (interior rows)."""
    interior = grid.interior
    stride = np.cumprod((1,) + grid.shape[::-1])[:-1][::-1]
    for axis in range(grid.dim):
        speed = mu[interior, axis]
        forward = speed > 0
        neighbour = np.where(forward, interior + stride[axis], interior - stride[axis])
        h = np.abs(grid.points[neighbour, axis] - grid.points[interior, axis])
        c = mass[interior] * np.abs(speed) / h
        rows += [interior, interior]
        cols += [interior, neighbour]
        vals += [c, -c]


def assemble_operators(
    model: DiffusionModel, density: SymmetrizingDensity, grid: SpaceTimeGrid
) -> tuple[SliceOperator, ...]:
    """Operators for every time slice; slices are independent and assembled concurrently."""
    with ThreadPoolExecutor(max_workers=constants.worker_count()) as executor:
        operators = tuple(executor.map(lambda k: assemble_slice(model, density, grid, k), range(grid.n_time)))
    if not operators[0].symmetric:
        log.warning("unit density mode with non-zero drift: upwinded form is only approximately symmetric")
    return operators


_PER_GRID: "weakref.WeakKeyDictionary[SpaceTimeGrid, dict]" = weakref.WeakKeyDictionary()


def _grid_cache(grid: SpaceTimeGrid) -> dict:
    return _PER_GRID.setdefault(grid, {})


def density_for(model: DiffusionModel, grid: SpaceTimeGrid) -> SymmetrizingDensity:
    cache = _grid_cache(grid)
    if ("density", model) not in cache:
        cache["density", model] = build_density(model, grid)
    return cache["density", model]


def operators_for(model: DiffusionModel, grid: SpaceTimeGrid) -> tuple[SliceOperator, ...]:
    """Slice operators of `model` on `grid`, assembled once and dropped when the grid is."""
    cache = _grid_cache(grid)
    if ("operators", model) not in cache:
        cache["operators", model] = assemble_operators(model, density_for(model, grid), grid)
    return cache["operators", model]


def cached_models(grid: SpaceTimeGrid) -> int:
    """Number of models with operators cached on `grid`."""
    return sum(1 for kind, _ in _PER_GRID.get(grid, {}) if kind == "operators")


def bilinear_alpha(op: SliceOperator, u: np.ndarray, v: np.ndarray, alpha: float) -> float:
    """E_alpha(u, v) = v^T K u + alpha u^T M v on one slice."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != op.mass.shape or v.shape != op.mass.shape:
        raise ValueError(f"slice vectors must have shape {op.mass.shape}, got {u.shape} and {v.shape}")
    return op.energy(u, v) + alpha * float(u @ (op.mass * v))


def _check_fields(operators, u: ScalarField, v: ScalarField) -> None:
    if u.grid is not v.grid:
        raise ValueError("fields live on different grids")
    if u.grid.n_time < 2:
        raise ValueError("space-time forms need at least 2 time slices")
    if len(operators) != u.grid.n_time:
        raise ValueError(f"expected {u.grid.n_time} slice operators, got {len(operators)}")


def coupled_form(operators, u: ScalarField, v: ScalarField, alpha: float) -> float:
    """The coupled form A_alpha(u, v) = sum_k dt_k E_alpha^(t_k)(u_k, v_k) over k < K."""
    _check_fields(operators, u, v)
    dt = u.grid.dt
    return float(sum(dt[k] * bilinear_alpha(operators[k], u.values[k], v.values[k], alpha) for k in range(dt.size)))


def spacetime_inner(operators, u: ScalarField, v: ScalarField) -> float:
    """(u, v)_nu = sum_k dt_k u_k^T M_k v_k over k < K."""
    _check_fields(operators, u, v)
    dt = u.grid.dt
    return float(sum(dt[k] * (u.values[k] @ (operators[k].mass * v.values[k])) for k in range(dt.size)))


def spacetime_form(
    operators, u: ScalarField, v: ScalarField, alpha: float, time_derivative_side: str = "left"
) -> float:
    """
    Discrete E_alpha(u, v).

    side "left":  -<du/dt, v> + A_alpha(u, v)
    side "right": +<u, dv/dt> + A_alpha(u, v)
    Differences over step k are divided by the fitted tau_k and weighted by
    dt_k. With uniform steps and mass constant in time the two sides differ
    by -(dt / tau) (u_K M v_K - u_0 M v_0).
    """
    _check_fields(operators, u, v)
    du = np.diff(u.values, axis=0)
    dv = np.diff(v.values, axis=0)
    weight = [dt / fitted_step(dt, alpha) for dt in u.grid.dt]
    if time_derivative_side == "left":
        drift = -sum(weight[k] * (du[k] @ (operators[k].mass * v.values[k])) for k in range(du.shape[0]))
    elif time_derivative_side == "right":
        drift = sum(weight[k] * (u.values[k + 1] @ (operators[k].mass * dv[k])) for k in range(dv.shape[0]))
    else:
        raise ValueError(f"time_derivative_side must be 'left' or 'right', got {time_derivative_side!r}")
    return float(drift) + coupled_form(operators, u, v, alpha)


def time_difference_energy(operators, u: ScalarField) -> float:
    """sum_k dt_k |(u_{k+1} - u_k)/dt_k|_{M_k}^2, reported as a discrete W-norm diagnostic."""
    du = np.diff(u.values, axis=0)
    dt = u.grid.dt
    return float(sum((du[k] @ (operators[k].mass * du[k])) / dt[k] for k in range(dt.size)))


def resolvent_apply(
    model: DiffusionModel, grid: SpaceTimeGrid, f: ScalarField, alpha: float, operators=None
) -> ScalarField:
    """
    Solve (alpha - d/dt - L) u = f backwards from u(T) = 0 with u = 0 on the
    spatial boundary (the process is killed on exit). Each step is one
    fitted implicit linear solve.
    """
    if f.grid is not grid:
        raise ValueError("field and grid do not match")
    operators = operators if operators is not None else operators_for(model, grid)
    interior = grid.interior
    u = np.zeros((grid.n_time, grid.n_space))
    for k in range(grid.n_time - 2, -1, -1):
        dt = float(grid.dt[k])
        system = operators[k].implicit_system(dt, alpha, grid)
        rhs = system.mass * (u[k + 1, interior] / system.step + f.values[k, interior])
        solution = spsolve(system.matrix.tocsc(), rhs)
        assert np.all(np.isfinite(solution)), f"singular resolvent system at slice {k}"
        u[k, interior] = solution
    return ScalarField(grid, u)
