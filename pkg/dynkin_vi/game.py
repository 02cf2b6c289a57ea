"""
Zero-sum stopping games with lower obstacle g (paid to the stopper) and upper
obstacle h (paid by the terminator).

The value w is found as phi - psi from the monotone alternating sequences

    phi_0 = psi_0 = 0,  psi_n = e[phi_{n-1} - h],  phi_n = e[psi_n + g]

where e[.] is the one-obstacle solver. A relaxation march on the double
obstacle problem g <= w <= h is kept alongside as an independent check.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from dynkin_vi import constants
from dynkin_vi.constants import ConfigError, GameDivergence, SchemeError, setting
from dynkin_vi.forms import operators_for, resolvent_apply
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import DiffusionModel
from dynkin_vi.log import stage
from dynkin_vi.obstacle import PenaltyConfig, solve_obstacle
from dynkin_vi.oracle import RelaxationConfig, relaxation_march

log = logging.getLogger(__name__)


def _first_violation(mask: np.ndarray, grid: SpaceTimeGrid) -> str:
    k, i = np.unravel_index(np.argmax(mask), mask.shape)
    return f"t={grid.t_nodes[k]:.6g}, x={grid.points[i].tolist()}"


@dataclass(frozen=True, eq=False)
class GameProblem:
    g: ScalarField
    h: ScalarField
    alpha: float
    f: ScalarField | None = None
    witness: tuple[ScalarField, ScalarField] | None = None

    def __post_init__(self):
        grid = self.g.grid
        if self.h.grid is not grid or (self.f is not None and self.f.grid is not grid):
            raise ValueError("game fields live on different grids")
        above = self.g.values > self.h.values
        if np.any(above):
            raise ConfigError("problem.h", f"lower obstacle exceeds upper obstacle at {_first_violation(above, grid)}")
        if self.witness is not None:
            v1, v2 = self.witness
            gap = v1.values - v2.values
            outside = (gap < self.g.values) | (gap > self.h.values)
            if np.any(outside):
                raise ConfigError(
                    "problem.witness", f"v1 - v2 leaves [g, h] at {_first_violation(outside, grid)}"
                )

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.g.grid

    @property
    def has_cost(self) -> bool:
        return self.f is not None and bool(np.any(self.f.values != 0.0))

    def terminal_data(self) -> np.ndarray:
        """Clamp of 0 into [g, h]: what the game pays when the process is killed."""
        return np.minimum(np.maximum(0.0, self.g.values), self.h.values)


@dataclass(frozen=True)
class GameConfig:
    outer_tol: float = field(default_factory=lambda: float(constants.Game.outer_tol))
    max_outer_iters: int = field(default_factory=lambda: int(constants.Game.max_outer_iters))
    monotone_slack: float = field(default_factory=lambda: float(constants.Penalty.monotone_slack))
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def __post_init__(self):
        for name, kind in (("outer_tol", float), ("max_outer_iters", int), ("monotone_slack", float)):
            object.__setattr__(self, name, setting(f"game.{name}", getattr(self, name), kind))
        if not self.outer_tol > 0:
            raise ConfigError("game.outer_tol", "must be positive")
        if self.max_outer_iters < 1:
            raise ConfigError("game.max_outer_iters", "must be at least 1")

    @classmethod
    def from_dict(cls, spec: Mapping | None, penalty: PenaltyConfig | None = None) -> "GameConfig":
        spec = dict(spec or {})
        unknown = set(spec) - {"outer_tol", "max_outer_iters", "monotone_slack"}
        if unknown:
            raise ConfigError(f"game.{sorted(unknown)[0]}", "unknown setting")
        return cls(**spec, penalty=penalty or PenaltyConfig())

    def to_dict(self) -> dict:
        return {"outer_tol": self.outer_tol, "max_outer_iters": self.max_outer_iters, "monotone_slack": self.monotone_slack}


@dataclass(frozen=True)
class GameIteration:
    index: int
    delta_phi: float
    delta_psi: float

    @property
    def delta(self) -> float:
        return max(self.delta_phi, self.delta_psi)

    def to_dict(self) -> dict:
        return {"index": self.index, "delta_phi": self.delta_phi, "delta_psi": self.delta_psi}


@dataclass(frozen=True, eq=False)
class GameSolution:
    phi_bar: ScalarField
    psi_bar: ScalarField
    stop_region_sigma: np.ndarray
    stop_region_tau: np.ndarray
    history: tuple[GameIteration, ...]
    contact_tol: float
    fixed_point_residual: float
    fixed_point_tol: float
    resolvent: ScalarField | None = None

    @property
    def w_bar(self) -> ScalarField:
        return self.phi_bar - self.psi_bar

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def fixed_point_converged(self) -> bool:
        """Both fixed-point identities phi = e[psi + g], psi = e[phi - h] hold to the outer tolerance."""
        return bool(self.fixed_point_residual < self.fixed_point_tol)

    def diagnostics(self, prob: GameProblem) -> dict:
        w = self.w_bar.values
        return {
            "iterations": self.iterations,
            "history": [step.to_dict() for step in self.history],
            "fixed_point_residual": self.fixed_point_residual,
            "fixed_point_converged": self.fixed_point_converged,
            "contact_tol": self.contact_tol,
            "sandwich_gap_lower": float(np.min(w - prob.g.values)),
            "sandwich_gap_upper": float(np.min(prob.h.values - w)),
            "stop_fraction_sigma": float(np.mean(self.stop_region_sigma)),
            "stop_fraction_tau": float(np.mean(self.stop_region_tau)),
            "holding_cost": self.resolvent is not None,
        }


def game_contact_tolerance(prob: GameProblem, cfg: PenaltyConfig) -> float:
    return cfg.contact_rtol * (1.0 + max(prob.g.sup_norm(), prob.h.sup_norm()))


def extract_saddle_regions(
    sol: GameSolution, g: ScalarField, h: ScalarField, contact_tol: float
) -> tuple[np.ndarray, np.ndarray]:
    """Stopper region {w = g} and terminator region {w = h}, equality up to contact_tol."""
    return _regions(sol.w_bar.values, g, h, contact_tol)


def _regions(w: np.ndarray, g: ScalarField, h: ScalarField, tol: float) -> tuple[np.ndarray, np.ndarray]:
    return np.abs(w - g.values) <= tol, np.abs(w - h.values) <= tol


def _check_monotone(new: ScalarField, old: ScalarField, name: str, n: int, slack: float) -> None:
    drop = float(np.max(old.values - new.values))
    if drop > slack:
        raise SchemeError(f"{name}_{n} fell below {name}_{n - 1} by {drop:.3e}")


def excessiveness_defect(model: DiffusionModel, grid: SpaceTimeGrid, v: ScalarField, alpha: float) -> float:
    """
    How far v is from being discretely alpha-excessive: the larger of -min(v)
    and the worst negative part, per unit mass, of the implicit step residual
    (M/tau + alpha M + K) v_k - M v_{k+1} / tau over interior nodes.
    """
    operators = operators_for(model, grid)
    interior, boundary = grid.interior, grid.boundary
    worst = max(0.0, -float(np.min(v.values)))
    for k in range(grid.n_time - 1):
        system = operators[k].implicit_system(float(grid.dt[k]), alpha, grid)
        residual = (
            system.matrix @ v.values[k, interior]
            + system.coupling @ v.values[k, boundary]
            - system.mass * v.values[k + 1, interior] / system.step
        )
        worst = max(worst, float(np.max(-residual / system.mass)))
    return worst


def _check_witness(model: DiffusionModel, grid: SpaceTimeGrid, prob: GameProblem, tol: float) -> None:
    for name, v in zip(("v1", "v2"), prob.witness):
        defect = excessiveness_defect(model, grid, v, prob.alpha)
        if defect > tol:
            raise ConfigError("problem.witness", f"{name} is not excessive (defect {defect:.3e})")


def iterate_game(model: DiffusionModel, grid: SpaceTimeGrid, prob: GameProblem, cfg: GameConfig | None = None) -> GameSolution:
    if prob.has_cost:
        raise ValueError("iterate_game solves cost-free games; use solve_game_with_cost")
    cfg = cfg or GameConfig()
    alpha = prob.alpha
    if prob.witness is not None:
        _check_witness(model, grid, prob, cfg.monotone_slack)
    phi = ScalarField.zeros(grid)
    psi = ScalarField.zeros(grid)
    history: list[GameIteration] = []
    log.info(f"Solving game on {grid.n_time}x{grid.n_space} nodes (outer_tol {cfg.outer_tol:.1e})")
    for n in range(1, cfg.max_outer_iters + 1):
        with stage(f"outer {n} psi"):
            psi_next = solve_obstacle(model, grid, phi - prob.h, alpha, cfg.penalty).value
        with stage(f"outer {n} phi"):
            phi_next = solve_obstacle(model, grid, psi_next + prob.g, alpha, cfg.penalty).value
        _check_monotone(psi_next, psi, "psi", n, cfg.monotone_slack)
        _check_monotone(phi_next, phi, "phi", n, cfg.monotone_slack)
        if prob.witness is not None:
            v1, v2 = prob.witness
            excess = max(float(np.max(phi_next.values - v1.values)), float(np.max(psi_next.values - v2.values)))
            if excess > cfg.monotone_slack:
                raise SchemeError(f"iterate {n} exceeds the separability witness by {excess:.3e}")
        step = GameIteration(n, phi_next.max_abs_diff(phi), psi_next.max_abs_diff(psi))
        history.append(step)
        phi, psi = phi_next, psi_next
        log.info(f"outer iteration {n}: delta phi {step.delta_phi:.3e}, delta psi {step.delta_psi:.3e}")
        if step.delta < cfg.outer_tol:
            break
    else:
        raise GameDivergence(
            f"no convergence after {cfg.max_outer_iters} outer iterations (last delta {history[-1].delta:.3e})"
        )

    phi_check = solve_obstacle(model, grid, psi + prob.g, alpha, cfg.penalty).value
    psi_check = solve_obstacle(model, grid, phi - prob.h, alpha, cfg.penalty).value
    fixed_point = max(phi_check.max_abs_diff(phi), psi_check.max_abs_diff(psi))
    if fixed_point >= cfg.outer_tol:
        log.warning(f"fixed-point identities hold only to {fixed_point:.3e}")

    tol = game_contact_tolerance(prob, cfg.penalty)
    sigma, tau = _regions(phi.values - psi.values, prob.g, prob.h, tol)
    return GameSolution(phi, psi, sigma, tau, tuple(history), tol, fixed_point, cfg.outer_tol)


def solve_game_with_cost(model: DiffusionModel, grid: SpaceTimeGrid, prob: GameProblem, cfg: GameConfig | None = None) -> GameSolution:
    """Shift both obstacles by R f, solve the cost-free game, and shift the value back."""
    cfg = cfg or GameConfig()
    if not prob.has_cost:
        return iterate_game(model, grid, prob, cfg)
    r = resolvent_apply(model, grid, prob.f, prob.alpha)
    reduced = iterate_game(model, grid, GameProblem(prob.g - r, prob.h - r, prob.alpha), cfg)
    phi = reduced.phi_bar + r
    tol = game_contact_tolerance(prob, cfg.penalty)
    sigma, tau = _regions(phi.values - reduced.psi_bar.values, prob.g, prob.h, tol)
    return GameSolution(
        phi, reduced.psi_bar, sigma, tau, reduced.history, tol, reduced.fixed_point_residual, reduced.fixed_point_tol, r
    )


def double_obstacle_oracle(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    prob: GameProblem,
    alpha: float | None = None,
    cfg: RelaxationConfig | None = None,
) -> ScalarField:
    """g <= w <= h solved directly by projected relaxation, holding cost kept as a source."""
    alpha = prob.alpha if alpha is None else alpha
    return relaxation_march(model, grid, prob.g, prob.h, alpha, prob.terminal_data(), prob.f, cfg)
