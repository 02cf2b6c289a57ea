"""
Problem configs: versioned JSON documents describing a model, a grid, the
obstacle/cost fields and the solver and Monte Carlo settings.

    {
      "schema": "dynkin-vi/1",
      "name": "put",
      "model":   {"dim": 1, "drift": {...}, "diffusion": {...}, "alpha": 0.06,
                  "density_mode": "user-supplied", "density": {...}},
      "grid":    {"t_max": 1.0, "t_steps": 200, "axes": [{"min": 0.2, "max": 3.0, "nodes": 281}]},
      "fields":  {"payoff": {"family": "put", "strike": 1.0}},
      "problem": {"kind": "stopping", "g": "payoff"},
      "penalty": {...}, "game": {...}, "mc": {...},
      "output":  {"dir": "out/put"}
    }

Settings a config leaves out come from config.yml.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from dynkin_vi import constants
from dynkin_vi.constants import ConfigError, DynkinVIException, setting, setting_list
from dynkin_vi.fields import FieldSpec, compile_field, evaluate_field
from dynkin_vi.forms import density_for, operators_for
from dynkin_vi.game import GameConfig, GameProblem, GameSolution, double_obstacle_oracle, solve_game_with_cost
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import (
    DensityMode,
    DensityProvenance,
    DiffusionModel,
    Diffusion,
    Drift,
    density_from_dict,
    drift_consistency_check,
)
from dynkin_vi.montecarlo import (
    CheckResult,
    MCConfig,
    PolicyRegion,
    VerificationReport,
    check_dynkin_formula,
    check_saddle,
    check_suboptimality,
    check_game_value_match,
    check_supermartingale,
    check_value_match,
    scheme_tolerance,
    simulate_paths,
)
from dynkin_vi.obstacle import (
    PenaltyConfig,
    VISolution,
    solve_obstacle,
    solve_obstacle_with_cost,
    vi_residual_check,
)
from dynkin_vi.oracle import psor_obstacle

log = logging.getLogger(__name__)

SCHEMA = "dynkin-vi/1"
KINDS = ("stopping", "game")


def _mapping(spec: Any, key: str, allowed: set[str] | None = None) -> dict:
    if not isinstance(spec, Mapping):
        raise ConfigError(key, "must be a JSON object")
    if allowed is not None:
        unknown = sorted(set(spec) - allowed)
        if unknown:
            raise ConfigError(f"{key}.{unknown[0]}", "unknown key")
    return dict(spec)


def _require(spec: Mapping, name: str, key: str):
    if name not in spec:
        raise ConfigError(f"{key}.{name}", "missing required key")
    return spec[name]


def _number(spec: Mapping, name: str, key: str, default=None, kind=float):
    value = spec.get(name, default) if default is not None else _require(spec, name, key)
    return setting(f"{key}.{name}", value, kind)


@dataclass(frozen=True)
class ModelBlock:
    dim: int
    drift: Mapping
    diffusion: Mapping
    alpha: float
    density_mode: str = DensityMode.UNIT.value
    density: Mapping | None = None

    @classmethod
    def from_dict(cls, spec: Any) -> "ModelBlock":
        spec = _mapping(spec, "model", {"dim", "drift", "diffusion", "alpha", "density_mode", "density"})
        mode = spec.get("density_mode", DensityMode.UNIT.value)
        if mode not in {m.value for m in DensityMode}:
            raise ConfigError("model.density_mode", f"unknown mode {mode!r}, expected one of {[m.value for m in DensityMode]}")
        return cls(
            _number(spec, "dim", "model", kind=int),
            _mapping(_require(spec, "drift", "model"), "model.drift"),
            _mapping(_require(spec, "diffusion", "model"), "model.diffusion"),
            _number(spec, "alpha", "model"),
            mode,
            None if spec.get("density") is None else _mapping(spec["density"], "model.density"),
        )

    def to_dict(self) -> dict:
        out = {
            "dim": self.dim,
            "drift": dict(self.drift),
            "diffusion": dict(self.diffusion),
            "alpha": self.alpha,
            "density_mode": self.density_mode,
        }
        if self.density is not None:
            out["density"] = dict(self.density)
        return out

    def build(self) -> DiffusionModel:
        parts = {}
        for name, parser in (("drift", Drift.from_dict), ("diffusion", Diffusion.from_dict), ("density", density_from_dict)):
            spec = getattr(self, name)
            if spec is None:
                continue
            try:
                parts[name] = parser(dict(spec), self.dim)
            except KeyError as e:
                raise ConfigError(f"model.{name}.{e.args[0]}", "missing required parameter") from None
            except (TypeError, ValueError) as e:
                raise ConfigError(f"model.{name}", str(e)) from None
        return DiffusionModel(
            self.dim,
            parts["drift"],
            parts["diffusion"],
            self.alpha,
            DensityMode(self.density_mode),
            parts.get("density"),
        )


@dataclass(frozen=True)
class AxisBlock:
    min: float
    max: float
    nodes: int

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max, "nodes": self.nodes}


@dataclass(frozen=True)
class GridBlock:
    t_max: float
    t_steps: int
    axes: tuple[AxisBlock, ...]

    @classmethod
    def from_dict(cls, spec: Any) -> "GridBlock":
        spec = _mapping(spec, "grid", {"t_max", "t_steps", "axes"})
        axes_spec = _require(spec, "axes", "grid")
        if not isinstance(axes_spec, list) or not axes_spec:
            raise ConfigError("grid.axes", "must be a non-empty list")
        axes = []
        for i, axis in enumerate(axes_spec):
            key = f"grid.axes[{i}]"
            axis = _mapping(axis, key, {"min", "max", "nodes"})
            block = AxisBlock(_number(axis, "min", key), _number(axis, "max", key), _number(axis, "nodes", key, kind=int))
            if block.nodes < 3:
                raise ConfigError(f"{key}.nodes", "needs at least 3 nodes")
            if not block.max > block.min:
                raise ConfigError(f"{key}.max", "must exceed min")
            axes.append(block)
        grid = cls(_number(spec, "t_max", "grid"), _number(spec, "t_steps", "grid", kind=int), tuple(axes))
        if not grid.t_max > 0:
            raise ConfigError("grid.t_max", "must be positive")
        if grid.t_steps < 1:
            raise ConfigError("grid.t_steps", "must be at least 1")
        return grid

    def to_dict(self) -> dict:
        return {"t_max": self.t_max, "t_steps": self.t_steps, "axes": [a.to_dict() for a in self.axes]}

    def build(self) -> SpaceTimeGrid:
        return SpaceTimeGrid.uniform(self.t_max, self.t_steps, [(a.min, a.max, a.nodes) for a in self.axes])


@dataclass(frozen=True)
class ProblemBlock:
    kind: str
    g: FieldSpec
    h: FieldSpec | None = None
    f: FieldSpec | None = None
    witness: tuple[FieldSpec, FieldSpec] | None = None

    @classmethod
    def from_dict(cls, spec: Any) -> "ProblemBlock":
        spec = _mapping(spec, "problem", {"kind", "g", "h", "f", "witness"})
        kind = _require(spec, "kind", "problem")
        if kind not in KINDS:
            raise ConfigError("problem.kind", f"expected one of {list(KINDS)}, got {kind!r}")
        if kind == "game" and spec.get("h") is None:
            raise ConfigError("problem.h", "game problems need an upper obstacle")
        if kind == "stopping" and spec.get("h") is not None:
            raise ConfigError("problem.h", "stopping problems take no upper obstacle")
        witness = spec.get("witness")
        if witness is not None:
            witness = _mapping(witness, "problem.witness", {"v1", "v2"})
            witness = (_require(witness, "v1", "problem.witness"), _require(witness, "v2", "problem.witness"))
        return cls(kind, _require(spec, "g", "problem"), spec.get("h"), spec.get("f"), witness)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "g": self.g}
        for name in ("h", "f"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.witness is not None:
            out["witness"] = {"v1": self.witness[0], "v2": self.witness[1]}
        return out


@dataclass(frozen=True)
class StartPoint:
    t: float
    x: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"t": self.t, "x": list(self.x)}


@dataclass(frozen=True)
class MCBlock:
    n_paths: int = field(default_factory=lambda: int(constants.MonteCarlo.n_paths))
    seed: int = field(default_factory=lambda: int(constants.MonteCarlo.seed))
    antithetic: bool = field(default_factory=lambda: bool(constants.MonteCarlo.antithetic))
    dt: float | None = None
    block_size: int = field(default_factory=lambda: int(constants.MonteCarlo.block_size))
    dt_fraction: float = field(default_factory=lambda: float(constants.MonteCarlo.dt_fraction))
    start_points: tuple[StartPoint, ...] = ()
    checkpoints: tuple[float, ...] = ()
    scheme_constant: float = field(default_factory=lambda: float(constants.MonteCarlo.scheme_constant))
    vi_trials: int = field(default_factory=lambda: int(constants.MonteCarlo.vi_trials))
    perturbation_cells: tuple[int, ...] = (1, 2, 3)

    @classmethod
    def from_dict(cls, spec: Any) -> "MCBlock":
        spec = _mapping(spec or {}, "mc", set(cls.__dataclass_fields__))
        kwargs = dict(spec)
        starts = []
        for i, point in enumerate(spec.get("start_points", [])):
            key = f"mc.start_points[{i}]"
            point = _mapping(point, key, {"t", "x"})
            x = _require(point, "x", key)
            x = x if isinstance(x, list) else [x]
            starts.append(StartPoint(_number(point, "t", key, default=0.0), setting_list(f"{key}.x", x)))
        kwargs["start_points"] = tuple(starts)
        kwargs["checkpoints"] = setting_list("mc.checkpoints", spec.get("checkpoints", ()))
        kwargs["perturbation_cells"] = setting_list("mc.perturbation_cells", spec.get("perturbation_cells", (1, 2, 3)), int)
        block = cls(**kwargs)
        block.config()
        return block

    def __post_init__(self):
        for name, kind in (
            ("n_paths", int),
            ("seed", int),
            ("antithetic", bool),
            ("block_size", int),
            ("dt_fraction", float),
            ("scheme_constant", float),
            ("vi_trials", int),
        ):
            object.__setattr__(self, name, setting(f"mc.{name}", getattr(self, name), kind))
        if self.dt is not None:
            object.__setattr__(self, "dt", setting("mc.dt", self.dt))

    def to_dict(self) -> dict:
        out = {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "antithetic": self.antithetic,
            "block_size": self.block_size,
            "dt_fraction": self.dt_fraction,
            "start_points": [p.to_dict() for p in self.start_points],
            "checkpoints": list(self.checkpoints),
            "scheme_constant": self.scheme_constant,
            "vi_trials": self.vi_trials,
            "perturbation_cells": list(self.perturbation_cells),
        }
        if self.dt is not None:
            out["dt"] = self.dt
        return out

    def config(self) -> MCConfig:
        return MCConfig(self.n_paths, self.dt, self.seed, self.antithetic, self.block_size, self.dt_fraction)


@dataclass(frozen=True)
class ProblemConfig:
    name: str
    model: ModelBlock
    grid: GridBlock
    problem: ProblemBlock
    fields: Mapping[str, FieldSpec] = field(default_factory=dict)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    game: Mapping = field(default_factory=dict)
    mc: MCBlock = field(default_factory=MCBlock)
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, spec: Any) -> "ProblemConfig":
        spec = _mapping(
            spec, "config", {"schema", "name", "model", "grid", "fields", "problem", "penalty", "game", "mc", "output"}
        )
        schema = spec.get("schema")
        if schema != SCHEMA:
            raise ConfigError("schema", f"expected {SCHEMA!r}, got {schema!r}")
        output = _mapping(spec.get("output", {}), "output", {"dir"})
        config = cls(
            str(spec.get("name", "problem")),
            ModelBlock.from_dict(_require(spec, "model", "config")),
            GridBlock.from_dict(_require(spec, "grid", "config")),
            ProblemBlock.from_dict(_require(spec, "problem", "config")),
            _mapping(spec.get("fields", {}), "fields"),
            PenaltyConfig.from_dict(spec.get("penalty")),
            _mapping(spec.get("game", {}), "game"),
            MCBlock.from_dict(spec.get("mc")),
            str(output.get("dir", "out")),
        )
        config.game_config()
        config.check_fields()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "ProblemConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
        return cls.from_dict(spec)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "model": self.model.to_dict(),
            "grid": self.grid.to_dict(),
            "fields": dict(self.fields),
            "problem": self.problem.to_dict(),
            "penalty": self.penalty.to_dict(),
            "game": dict(self.game),
            "mc": self.mc.to_dict(),
            "output": {"dir": self.output_dir},
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def with_overrides(self, seed: int | None = None, paths: int | None = None, out: str | None = None) -> "ProblemConfig":
        mc = self.mc
        if seed is not None:
            mc = dataclasses.replace(mc, seed=int(seed))
        if paths is not None:
            mc = dataclasses.replace(mc, n_paths=int(paths))
        mc.config()
        return dataclasses.replace(self, mc=mc, output_dir=self.output_dir if out is None else str(out))

    def game_config(self) -> GameConfig:
        return GameConfig.from_dict(self.game, self.penalty)

    def field_specs(self) -> dict[str, FieldSpec]:
        specs = {"problem.g": self.problem.g}
        if self.problem.h is not None:
            specs["problem.h"] = self.problem.h
        if self.problem.f is not None:
            specs["problem.f"] = self.problem.f
        if self.problem.witness is not None:
            specs["problem.witness.v1"], specs["problem.witness.v2"] = self.problem.witness
        return specs

    def check_fields(self) -> None:
        """Resolve every field reference without evaluating anything."""
        for key, spec in self.field_specs().items():
            compile_field(spec, self.model.dim, self.fields, key)
        for name, spec in self.fields.items():
            compile_field(spec, self.model.dim, self.fields, f"fields.{name}")

    def build(self) -> "Problem":
        model = self.model.build()
        grid = self.grid.build()
        if grid.dim != model.dim:
            raise ConfigError("grid.axes", f"{grid.dim} axes for a {model.dim}-dimensional model")
        model.validate(grid)
        fields = {key: evaluate_field(spec, grid, self.fields, key) for key, spec in self.field_specs().items()}
        problem = Problem(self, model, grid, fields)
        if problem.kind == "game":
            problem.game_problem()
        return problem


Solution = VISolution | GameSolution


@dataclass(frozen=True, eq=False)
class Problem:
    """A config with its model, grid and fields evaluated."""

    config: ProblemConfig
    model: DiffusionModel
    grid: SpaceTimeGrid
    fields: Mapping[str, ScalarField]

    @property
    def kind(self) -> str:
        return self.config.problem.kind

    @property
    def alpha(self) -> float:
        return self.model.alpha

    @property
    def g(self) -> ScalarField:
        return self.fields["problem.g"]

    @property
    def h(self) -> ScalarField | None:
        return self.fields.get("problem.h")

    @property
    def f(self) -> ScalarField | None:
        return self.fields.get("problem.f")

    def game_problem(self) -> GameProblem:
        witness = None
        if "problem.witness.v1" in self.fields:
            witness = (self.fields["problem.witness.v1"], self.fields["problem.witness.v2"])
        return GameProblem(self.g, self.h, self.alpha, self.f, witness)

    def solve(self) -> Solution:
        log.info(f"Solving '{self.config.name}' ({self.kind}, {self.grid.n_time}x{self.grid.n_space} nodes)")
        if self.kind == "game":
            return solve_game_with_cost(self.model, self.grid, self.game_problem(), self.config.game_config())
        if self.f is not None:
            solution = solve_obstacle_with_cost(self.model, self.grid, self.g, self.f, self.alpha, self.config.penalty)
        else:
            solution = solve_obstacle(self.model, self.grid, self.g, self.alpha, self.config.penalty)
        if self.config.mc.vi_trials > 0:
            residual = vi_residual_check(
                solution, self.model, self.grid, self.g, self.alpha, self.config.mc.vi_trials, self.f, self.config.mc.seed
            )
            solution = solution.with_vi_residual(residual)
        return solution

    def value_field(self, solution: Solution) -> ScalarField:
        return solution.w_bar if isinstance(solution, GameSolution) else solution.value

    def diagnostics(self, solution: Solution) -> dict:
        density = density_for(self.model, self.grid)
        report: dict = {
            "name": self.config.name,
            "kind": self.kind,
            "grid": {"n_time": self.grid.n_time, "shape": list(self.grid.shape)},
            "density": density.provenance.value,
            "obstacle_sup": self.g.sup_norm(),
        }
        if density.provenance is not DensityProvenance.UNIT:
            report["drift_consistency"] = drift_consistency_check(self.model, density, self.grid).to_dict()
        if isinstance(solution, GameSolution):
            report["game"] = solution.diagnostics(self.game_problem())
        else:
            report["obstacle"] = solution.diagnostics(operators_for(self.model, self.grid))
        value = self.value_field(solution)
        report["start_values"] = [
            {"t": p.t, "x": list(p.x), "value": value.at(p.t, p.x)} for p in self.config.mc.start_points
        ]
        return report

    def compare_oracle(self, solution: Solution) -> dict:
        """Max-norm distance between the solver and the projected-relaxation march of the same problem."""
        if isinstance(solution, GameSolution):
            oracle = double_obstacle_oracle(self.model, self.grid, self.game_problem())
            value = solution.w_bar
        else:
            oracle = psor_obstacle(self.model, self.grid, self.g, self.alpha, self.f)
            value = solution.value
        distance = value.max_abs_diff(oracle)
        log.info(f"Solver vs relaxation oracle: max difference {distance:.3e}")
        return {"kind": self.kind, "max_abs_diff": distance, "oracle_sup": oracle.sup_norm(), "value_sup": value.sup_norm()}

    def verify(self, solution: Solution, negative_control: bool = False) -> VerificationReport:
        mc = self.config.mc
        if not mc.start_points:
            raise ConfigError("mc.start_points", "verification needs at least one start point")
        tol = scheme_tolerance(self.grid, mc.scheme_constant)
        cfg = mc.config()
        checks: list[CheckResult] = []
        controls: list[CheckResult] = []
        for key, point in enumerate(mc.start_points):
            stream = simulate_paths(self.model, self.grid, (point.t, point.x), cfg, stream_key=key)
            if isinstance(solution, GameSolution):
                checks += self._verify_game(stream, solution, tol)
            else:
                checks += self._verify_stopping(stream, solution, tol)
            if negative_control:
                name = f"negative control: raw obstacle ({point.t:g}, {list(point.x)})"
                controls += check_supermartingale(stream, self.g, self.alpha, mc.checkpoints, tol, name=name)
        report = VerificationReport(tuple(checks), tuple(controls), tol)
        log.info(f"Verification {'passed' if report.passed else 'failed'}: {len(checks)} checks")
        return report

    def _verify_stopping(self, stream, solution: VISolution, tol: float) -> list[CheckResult]:
        region = PolicyRegion(self.grid, solution.contact_mask, "contact")
        value = solution.value.at(stream.start_time, stream.start_x)
        where = f"({stream.start_time:g}, {stream.start_x.tolist()})"
        checks = [check_value_match(stream, value, self.g, self.f, self.alpha, region, tol, f"value match {where}")]
        checks += check_suboptimality(stream, value, self.g, self.f, self.alpha, region, tol, self.config.mc.perturbation_cells)
        excessive = solution.value if solution.resolvent is None else solution.value - solution.resolvent
        checks += check_supermartingale(stream, excessive, self.alpha, self.config.mc.checkpoints, tol, contact=region)
        if solution.resolvent is not None:
            checks.append(check_dynkin_formula(stream, solution.resolvent, self.f, self.alpha, region, tol))
        return checks

    def _verify_game(self, stream, solution: GameSolution, tol: float) -> list[CheckResult]:
        sigma = PolicyRegion(self.grid, solution.stop_region_sigma, "stopper")
        tau = PolicyRegion(self.grid, solution.stop_region_tau, "terminator")
        value = solution.w_bar.at(stream.start_time, stream.start_x)
        where = f"({stream.start_time:g}, {stream.start_x.tolist()})"
        checks = [
            check_game_value_match(stream, value, self.g, self.h, self.f, self.alpha, sigma, tau, tol, f"game value match {where}")
        ]
        checks += check_saddle(stream, self.g, self.h, self.f, self.alpha, sigma, tau, tol, self.config.mc.perturbation_cells)
        phi_hat = solution.phi_bar if solution.resolvent is None else solution.phi_bar - solution.resolvent
        checks += check_supermartingale(stream, phi_hat, self.alpha, self.config.mc.checkpoints, tol, sigma, "supermartingale phi")
        checks += check_supermartingale(stream, solution.psi_bar, self.alpha, self.config.mc.checkpoints, tol, tau, "supermartingale psi")
        return checks


def load_problem(path: str | Path, seed: int | None = None, paths: int | None = None, out: str | None = None) -> Problem:
    try:
        return ProblemConfig.load(path).with_overrides(seed, paths, out).build()
    except DynkinVIException:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError("config", str(e)) from None
