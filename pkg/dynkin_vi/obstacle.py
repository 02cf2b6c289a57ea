"""
One-obstacle problems: the value e_g as the increasing limit of penalized
solutions, its contact set and the holding-cost variant.

Data at the horizon and on the spatial boundary is max(g, 0): the process is
killed there, so stopping pays g and waiting pays nothing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from dynkin_vi import constants
from dynkin_vi.constants import ConfigError, PenaltyDivergence, SchemeError, setting, setting_list
from dynkin_vi.forms import (
    ImplicitSystem,
    operators_for,
    resolvent_apply,
    spacetime_form,
    spacetime_inner,
    time_difference_energy,
)
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import DiffusionModel
from dynkin_vi.log import stage

log = logging.getLogger(__name__)

DAMPING = 0.5


@dataclass(frozen=True)
class PenaltyConfig:
    eps_schedule: tuple[float, ...] = field(default_factory=lambda: tuple(constants.Penalty.eps_schedule))
    inner_tol: float = field(default_factory=lambda: float(constants.Penalty.inner_tol))
    max_inner_iters: int = field(default_factory=lambda: int(constants.Penalty.max_inner_iters))
    monotone_slack: float = field(default_factory=lambda: float(constants.Penalty.monotone_slack))
    contact_rtol: float = field(default_factory=lambda: float(constants.Penalty.contact_rtol))

    def __post_init__(self):
        schedule = setting_list("penalty.eps_schedule", self.eps_schedule)
        object.__setattr__(self, "eps_schedule", schedule)
        for name, kind in (("inner_tol", float), ("max_inner_iters", int), ("monotone_slack", float), ("contact_rtol", float)):
            object.__setattr__(self, name, setting(f"penalty.{name}", getattr(self, name), kind))
        if not schedule:
            raise ConfigError("penalty.eps_schedule", "must not be empty")
        if any(eps <= 0 for eps in schedule):
            raise ConfigError("penalty.eps_schedule", "entries must be positive")
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError("penalty.eps_schedule", "must be strictly decreasing")
        if not self.inner_tol > 0:
            raise ConfigError("penalty.inner_tol", "must be positive")
        if self.max_inner_iters < 1:
            raise ConfigError("penalty.max_inner_iters", "must be at least 1")

    @classmethod
    def from_dict(cls, spec: Mapping | None) -> "PenaltyConfig":
        spec = dict(spec or {})
        unknown = set(spec) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"penalty.{sorted(unknown)[0]}", "unknown setting")
        return cls(**spec)

    def to_dict(self) -> dict:
        return {
            "eps_schedule": list(self.eps_schedule),
            "inner_tol": self.inner_tol,
            "max_inner_iters": self.max_inner_iters,
            "monotone_slack": self.monotone_slack,
            "contact_rtol": self.contact_rtol,
        }


@dataclass(frozen=True)
class PenaltyLevel:
    """What happened at one epsilon of the continuation."""

    eps: float
    delta: float | None
    penalty_residual: float
    equation_residual: float
    newton_iterations: int
    damped_slices: int

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "delta": self.delta,
            "penalty_residual": self.penalty_residual,
            "equation_residual": self.equation_residual,
            "newton_iterations": self.newton_iterations,
            "damped_slices": self.damped_slices,
        }


@dataclass(frozen=True, eq=False)
class PenalizedField:
    value: ScalarField
    equation_residual: float
    newton_iterations: int
    damped_slices: int


@dataclass(frozen=True, eq=False)
class VISolution:
    value: ScalarField
    obstacle: ScalarField
    contact_mask: np.ndarray
    contact_tol: float
    levels: tuple[PenaltyLevel, ...]
    resolvent: ScalarField | None = None
    vi_residual: float | None = None

    @property
    def penalty_residual(self) -> np.ndarray:
        return np.array([level.penalty_residual for level in self.levels])

    def with_vi_residual(self, residual: float) -> "VISolution":
        return VISolution(
            self.value, self.obstacle, self.contact_mask, self.contact_tol, self.levels, self.resolvent, residual
        )

    def contact_field(self) -> ScalarField:
        return self.value.with_values(self.contact_mask.astype(float))

    def diagnostics(self, operators=None) -> dict:
        report = {
            "levels": [level.to_dict() for level in self.levels],
            "penalty_residual": self.penalty_residual.tolist(),
            "penalty_residual_sup": float(np.max(self.penalty_residual)),
            "contact_tol": self.contact_tol,
            "contact_fraction": float(np.mean(self.contact_mask)),
            "obstacle_sup": self.obstacle.sup_norm(),
            "dominance_gap": float(np.min(self.value.values - self.obstacle.values)),
            "vi_residual": self.vi_residual,
            "holding_cost": self.resolvent is not None,
        }
        if operators is not None:
            report["time_difference_energy"] = time_difference_energy(operators, self.value)
        if self.value.grid.dim == 1:
            report["free_boundary"] = [None if np.isnan(s) else float(s) for s in free_boundary(self)]
        return report


def killed_data(g: np.ndarray) -> np.ndarray:
    return np.maximum(g, 0.0)


def _equation_residual(system: ImplicitSystem, u, rhs, obstacle, pen) -> float:
    shortfall = np.maximum(obstacle - u, 0.0)
    residual = system.matrix @ u - pen * shortfall - rhs
    scale = 1.0 + abs(system.matrix) @ np.abs(u) + pen * shortfall + np.abs(rhs)
    return float(np.max(np.abs(residual) / scale)) if u.size else 0.0


def _newton_slice(system: ImplicitSystem, rhs, obstacle, pen, guess, cfg: PenaltyConfig, k: int):
    """
    Semismooth Newton on A u - pen (g - u)^+ = rhs: each step solves the
    linear system with the penalty switched on where u < g. Falls back to
    damped steps of the same map when the active set cycles.
    """
    u = guess.copy()
    active = u < obstacle

    def newton_map(active):
        lhs = (system.matrix + sp.diags(pen * active)).tocsc()
        return spsolve(lhs, rhs + pen * active * obstacle)

    for iteration in range(1, cfg.max_inner_iters + 1):
        new = newton_map(active)
        step = float(np.max(np.abs(new - u)))
        u = new
        new_active = u < obstacle
        log.debug(f"slice {k} newton {iteration}: step {step:.3e}, active {int(new_active.sum())}")
        if np.array_equal(new_active, active) and step <= cfg.inner_tol * (1.0 + float(np.max(np.abs(u)))):
            return u, iteration, False
        active = new_active

    log.warning(f"slice {k}: active set did not settle in {cfg.max_inner_iters} Newton steps, damping")
    for iteration in range(1, cfg.max_inner_iters + 1):
        target = newton_map(u < obstacle)
        step = float(np.max(np.abs(target - u)))
        u = u + DAMPING * (target - u)
        if step <= cfg.inner_tol * (1.0 + float(np.max(np.abs(u)))):
            return target, cfg.max_inner_iters + iteration, True
    raise PenaltyDivergence(k, f"no convergence after {2 * cfg.max_inner_iters} Newton steps")


def solve_penalized(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    g: ScalarField,
    alpha: float,
    eps: float,
    *,
    source: ScalarField | None = None,
    cfg: PenaltyConfig | None = None,
    initial: ScalarField | None = None,
) -> ScalarField:
    """Fitted implicit march of the penalized equation with penalty weight 1/eps."""
    return _penalized_march(model, grid, g, alpha, eps, source, cfg or PenaltyConfig(), initial).value


def _penalized_march(model, grid, g, alpha, eps, source, cfg, initial) -> PenalizedField:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if g.grid is not grid or (source is not None and source.grid is not grid):
        raise ValueError("fields and grid do not match")
    operators = operators_for(model, grid)
    interior, boundary = grid.interior, grid.boundary
    data = killed_data(g.values)
    u = np.empty((grid.n_time, grid.n_space))
    u[-1] = data[-1]
    worst, iterations, damped = 0.0, 0, 0
    for k in range(grid.n_time - 2, -1, -1):
        dt = float(grid.dt[k])
        system = operators[k].implicit_system(dt, alpha, grid)
        u[k, boundary] = data[k, boundary]
        rhs = system.mass * u[k + 1, interior] / system.step - system.coupling @ u[k, boundary]
        if source is not None:
            rhs += system.mass * source.values[k, interior]
        pen = system.mass / eps
        guess = initial.values[k, interior] if initial is not None else u[k + 1, interior]
        u[k, interior], steps, fell_back = _newton_slice(system, rhs, g.values[k, interior], pen, guess, cfg, k)
        worst = max(worst, _equation_residual(system, u[k, interior], rhs, g.values[k, interior], pen))
        iterations += steps
        damped += fell_back
    return PenalizedField(ScalarField(grid, u), worst, iterations, damped)


def solve_penalized_with_source(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    g: ScalarField,
    f: ScalarField,
    alpha: float,
    eps: float,
    cfg: PenaltyConfig | None = None,
) -> ScalarField:
    """Penalized equation with the holding cost kept as a source term (no reduction)."""
    return solve_penalized(model, grid, g, alpha, eps, source=f, cfg=cfg)


def _penalty_residual(operators, value: ScalarField, g: ScalarField, eps: float) -> float:
    shortfall = value.with_values(np.maximum(g.values - value.values, 0.0))
    return float(np.sqrt(max(spacetime_inner(operators, shortfall, shortfall), 0.0)) / eps)


def contact_tolerance(g: ScalarField, cfg: PenaltyConfig) -> float:
    return cfg.contact_rtol * (1.0 + g.sup_norm())


def solve_obstacle(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    g: ScalarField,
    alpha: float,
    cfg: PenaltyConfig | None = None,
    source: ScalarField | None = None,
) -> VISolution:
    """
    Run the penalized march over the epsilon schedule, each level warm-started
    from the previous one. Solutions must increase as eps decreases.
    """
    cfg = cfg or PenaltyConfig()
    operators = operators_for(model, grid)
    log.info(f"Solving obstacle problem on {grid.n_time}x{grid.n_space} nodes, {len(cfg.eps_schedule)} penalty levels")
    levels: list[PenaltyLevel] = []
    previous: ScalarField | None = None
    for eps in cfg.eps_schedule:
        with stage(f"eps {eps:.0e}"):
            result = _penalized_march(model, grid, g, alpha, eps, source, cfg, previous)
        value = result.value
        delta = None
        if previous is not None:
            drop = float(np.max(previous.values - value.values))
            if drop > cfg.monotone_slack:
                raise SchemeError(f"penalized solutions decreased by {drop:.3e} when eps fell to {eps:.1e}")
            delta = value.max_abs_diff(previous)
        level = PenaltyLevel(
            eps,
            delta,
            _penalty_residual(operators, value, g, eps),
            result.equation_residual,
            result.newton_iterations,
            result.damped_slices,
        )
        levels.append(level)
        log.info(
            f"eps={eps:.1e}: delta={'-' if delta is None else f'{delta:.3e}'}, "
            f"penalty residual {level.penalty_residual:.3e}, {level.newton_iterations} Newton steps"
        )
        previous = value
        if delta is not None and delta < cfg.inner_tol:
            log.info(f"Penalty continuation settled at eps={eps:.1e}")
            break

    contact_tol = contact_tolerance(g, cfg)
    contact = np.abs(previous.values - g.values) <= contact_tol
    return VISolution(previous, g, contact, contact_tol, tuple(levels))


def solve_obstacle_with_cost(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    g: ScalarField,
    f: ScalarField,
    alpha: float,
    cfg: PenaltyConfig | None = None,
) -> VISolution:
    """Reduce to the cost-free problem with obstacle g - R f, then add R f back."""
    cfg = cfg or PenaltyConfig()
    r = resolvent_apply(model, grid, f, alpha)
    reduced = solve_obstacle(model, grid, g - r, alpha, cfg)
    value = reduced.value + r
    contact_tol = contact_tolerance(g, cfg)
    contact = np.abs(value.values - g.values) <= contact_tol
    return VISolution(value, g, contact, contact_tol, reduced.levels, resolvent=r)


def vi_residual_check(
    solution: VISolution,
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    g: ScalarField,
    alpha: float,
    trial_count: int,
    f: ScalarField | None = None,
    seed: int = 0,
) -> float:
    """
    Smallest E_alpha(u, psi - u) - (f, psi - u) over random admissible psi >= g.

    Trials share u's data at the horizon and on the boundary: half add
    non-negative bumps to u, half take max(g, u + noise). A negative result
    is a violation of the variational inequality.
    """
    operators = operators_for(model, grid)
    u = solution.value
    rng = np.random.default_rng(seed)
    free = np.zeros((grid.n_time, grid.n_space), dtype=bool)
    free[:-1, grid.interior] = True
    scale = 0.1 * (1.0 + u.sup_norm())
    worst = 0.0
    for trial in range(trial_count):
        noise = scale * rng.standard_normal(free.shape) * free
        if trial % 2 == 0:
            psi = u.values + np.abs(noise)
        else:
            psi = np.where(free, np.maximum(g.values, u.values + noise), u.values)
        w = u.with_values(psi - u.values)
        gap = spacetime_form(operators, u, w, alpha)
        if f is not None:
            gap -= spacetime_inner(operators, f, w)
        worst = min(worst, gap) if trial else gap
    log.info(f"VI residual over {trial_count} trials: {worst:.3e}")
    return float(worst)


def free_boundary(solution: VISolution) -> np.ndarray:
    """
    Exercise boundary per time slice for 1D problems: the upper end of the
    contact run that starts at the lower edge of the box (NaN when there is none).
    """
    grid = solution.value.grid
    if grid.dim != 1:
        raise ValueError("free boundary extraction is only defined in one dimension")
    x = grid.axes[0]
    out = np.full(grid.n_time, np.nan)
    for k, row in enumerate(solution.contact_mask):
        if row[0]:
            run = np.argmin(row) if not row.all() else row.size
            out[k] = x[run - 1]
    return out


def minimality_gap(solution: VISolution, candidates: Sequence[ScalarField]) -> float:
    """max over candidates of max(value - w); non-positive up to tolerance for excessive w >= g."""
    return max(float(np.max(solution.value.values - w.values)) for w in candidates)
