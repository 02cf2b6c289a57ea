"""
Monte Carlo verification of solver output.

Paths of dX = b dt + a dB are simulated by Euler-Maruyama in blocks. Every
block draws from its own seed sequence keyed by (seed, stream, block), so a
block is the same no matter which worker produces it or how often it is
regenerated; evaluating two policies in separate passes still uses common
random numbers. A path is frozen where it leaves the grid box.

Payoffs follow the solver's conventions: a stopping rule that fires pays the
obstacle, a path that reaches the horizon or the box edge first pays the
killed data (max(g, 0) for stopping, the clamp of 0 into [g, h] for games).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence, TypeVar

import numpy as np
from scipy import ndimage

from dynkin_vi import constants
from dynkin_vi.constants import ConfigError, StartOutsideBox, setting
from dynkin_vi.grid import ScalarField, SpaceTimeGrid, sample_nodal
from dynkin_vi.model import DiffusionModel

log = logging.getLogger(__name__)

T = TypeVar("T")

TIME_EPS = 1e-12


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = field(default_factory=lambda: int(constants.MonteCarlo.n_paths))
    dt: float | None = None
    seed: int = field(default_factory=lambda: int(constants.MonteCarlo.seed))
    antithetic: bool = field(default_factory=lambda: bool(constants.MonteCarlo.antithetic))
    block_size: int = field(default_factory=lambda: int(constants.MonteCarlo.block_size))
    dt_fraction: float = field(default_factory=lambda: float(constants.MonteCarlo.dt_fraction))

    def __post_init__(self):
        for name, kind in (("n_paths", int), ("seed", int), ("antithetic", bool), ("block_size", int), ("dt_fraction", float)):
            object.__setattr__(self, name, setting(f"mc.{name}", getattr(self, name), kind))
        if self.dt is not None:
            object.__setattr__(self, "dt", setting("mc.dt", self.dt))
        if self.n_paths < 100:
            raise ConfigError("mc.n_paths", f"needs at least 100 paths, got {self.n_paths}")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("mc.dt", "must be positive")
        if self.block_size < 2:
            raise ConfigError("mc.block_size", "must be at least 2")
        if not 0 < self.dt_fraction <= 1:
            raise ConfigError("mc.dt_fraction", "must lie in (0, 1]")
        if self.antithetic and (self.n_paths % 2 or self.block_size % 2):
            raise ConfigError("mc.antithetic", "antithetic sampling needs even n_paths and block_size")

    def step(self, grid: SpaceTimeGrid) -> float:
        return self.dt if self.dt is not None else float(np.min(grid.dt)) * self.dt_fraction


class HittingRule(str, Enum):
    INCLUSIVE = "inclusive"  # inf{t >= 0}
    STRICT = "strict"  # inf{t > 0}


@dataclass(frozen=True, eq=False)
class PolicyRegion:
    """
    A hitting-time stopping rule. The node mask is interpolated multilinearly
    in (t, x) and a point is inside where the interpolant is >= 1/2. A
    `stop_time` turns the region into the deterministic rule "stop at t".
    """

    grid: SpaceTimeGrid
    mask: np.ndarray
    name: str = "region"
    hitting: HittingRule = HittingRule.INCLUSIVE
    stop_time: float | None = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.grid.n_time, self.grid.n_space):
            raise ValueError(f"mask shape {mask.shape} does not match grid")
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "hitting", HittingRule(self.hitting))

    @classmethod
    def everything(cls, grid: SpaceTimeGrid, name: str = "immediate") -> "PolicyRegion":
        return cls(grid, np.ones((grid.n_time, grid.n_space), dtype=bool), name)

    @classmethod
    def nothing(cls, grid: SpaceTimeGrid, name: str = "never") -> "PolicyRegion":
        return cls(grid, np.zeros((grid.n_time, grid.n_space), dtype=bool), name)

    @classmethod
    def from_time(cls, grid: SpaceTimeGrid, t: float, name: str | None = None) -> "PolicyRegion":
        return cls(grid, np.ones((grid.n_time, grid.n_space), dtype=bool), name or f"fixed-time {t:g}", stop_time=t)

    def _spatial(self, operation, cells: int, **kwargs) -> np.ndarray:
        structure = ndimage.generate_binary_structure(self.grid.dim, 1)[None, ...]
        cube = self.mask.reshape((self.grid.n_time,) + self.grid.shape)
        return operation(cube, structure=structure, iterations=cells, **kwargs).reshape(self.mask.shape)

    def dilate(self, cells: int) -> "PolicyRegion":
        """Grow the region by `cells` grid cells in space, slice by slice."""
        mask = self._spatial(ndimage.binary_dilation, cells)
        return PolicyRegion(self.grid, mask, f"{self.name} dilated {cells}", self.hitting)

    def erode(self, cells: int) -> "PolicyRegion":
        mask = self._spatial(ndimage.binary_erosion, cells, border_value=1)
        return PolicyRegion(self.grid, mask, f"{self.name} eroded {cells}", self.hitting)

    def with_hitting(self, hitting: HittingRule) -> "PolicyRegion":
        return PolicyRegion(self.grid, self.mask, self.name, hitting, self.stop_time)

    def contains(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.stop_time is not None:
            return t >= self.stop_time - TIME_EPS
        if not self.mask.any():
            return np.zeros(t.shape, dtype=bool)
        if self.mask.all():
            return np.ones(t.shape, dtype=bool)
        return sample_nodal(self.grid, self.mask.astype(float), t, x, order=1) >= 0.5


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_effective: int
    truncation_rate: float

    @classmethod
    def from_samples(cls, samples: np.ndarray, truncated: np.ndarray, antithetic_pairs: bool = False) -> "MCEstimate":
        samples = np.asarray(samples, dtype=float)
        if antithetic_pairs:
            samples = samples.reshape(2, -1).mean(axis=0)
        n = samples.size
        stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(np.mean(samples)), stderr, n, float(np.mean(truncated)))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "n_effective": self.n_effective,
            "truncation_rate": self.truncation_rate,
        }


@dataclass(frozen=True, eq=False)
class PathBlock:
    index: int
    start_time: float
    times: np.ndarray
    states: np.ndarray
    exit_step: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def state_at(self, steps: np.ndarray) -> np.ndarray:
        return self.states[np.arange(self.n_paths), steps]

    def all_times(self) -> np.ndarray:
        return np.broadcast_to(self.times, (self.n_paths, self.times.size))

    def running_cost(self, f: ScalarField | None, alpha: float) -> np.ndarray:
        """
        Discounted running cost from the start to every step, shape (n, S+1).
        f is linear between steps and the discount is integrated exactly, so
        a constant cost gives the closed form to rounding.
        """
        out = np.zeros((self.n_paths, self.times.size))
        if f is None:
            return out
        values = f.sample(self.all_times(), self.states)
        tau = self.dt
        flat = -np.expm1(-alpha * tau) / alpha
        ramp = (-np.expm1(-alpha * tau) - alpha * tau * np.exp(-alpha * tau)) / (alpha**2 * tau)
        discount = np.exp(-alpha * (self.times[:-1] - self.start_time))
        segments = discount * (values[:, :-1] * flat + (values[:, 1:] - values[:, :-1]) * ramp)
        out[:, 1:] = np.cumsum(segments, axis=1)
        return out

    def stop_steps(self, region: PolicyRegion) -> tuple[np.ndarray, np.ndarray]:
        """First step inside the region before the path is truncated; truncation step where it never enters."""
        inside = region.contains(self.all_times(), self.states)
        if region.hitting is HittingRule.STRICT:
            inside[:, 0] = False
        inside &= np.arange(self.times.size)[None, :] <= self.exit_step[:, None]
        hit = inside.any(axis=1)
        return np.where(hit, inside.argmax(axis=1), self.exit_step), hit


class PathStream:
    """Lazily simulated paths from one start point, produced block by block."""

    def __init__(
        self,
        model: DiffusionModel,
        grid: SpaceTimeGrid,
        start_time: float,
        start_x: Sequence[float],
        cfg: MCConfig | None = None,
        stream_key: int = 0,
    ):
        self.model = model
        self.grid = grid
        self.cfg = cfg or MCConfig()
        self.start_time = float(start_time)
        self.start_x = np.asarray(start_x, dtype=float).reshape(-1)
        self.stream_key = int(stream_key)
        if self.start_x.size != grid.dim:
            raise StartOutsideBox(f"start point {self.start_x.tolist()} has the wrong dimension for a {grid.dim}D grid")
        if not (0.0 <= self.start_time < grid.horizon and grid.contains(self.start_x)):
            raise StartOutsideBox(
                f"start (t={self.start_time:g}, x={self.start_x.tolist()}) lies outside [0, {grid.horizon:g}) x grid box"
            )
        n_steps = max(1, int(np.ceil((grid.horizon - self.start_time) / self.cfg.step(grid) - 1e-9)))
        self.times = np.linspace(self.start_time, grid.horizon, n_steps + 1)
        self.times.flags.writeable = False

    @property
    def n_blocks(self) -> int:
        return -(-self.cfg.n_paths // self.cfg.block_size)

    @property
    def antithetic(self) -> bool:
        return self.cfg.antithetic

    def block(self, index: int) -> PathBlock:
        n = min(self.cfg.block_size, self.cfg.n_paths - index * self.cfg.block_size)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(self.stream_key, index)))
        n_steps = self.times.size - 1
        noise_dim = self.model.noise_dim
        if self.cfg.antithetic:
            half = rng.standard_normal((n_steps, n // 2, noise_dim))
            z = np.concatenate([half, -half], axis=1)
        else:
            z = rng.standard_normal((n_steps, n, noise_dim))

        states = np.empty((n, n_steps + 1, self.grid.dim))
        states[:, 0] = self.start_x
        exit_step = np.full(n, n_steps)
        alive = np.ones(n, dtype=bool)
        for j in range(n_steps):
            dt = float(self.times[j + 1] - self.times[j])
            states[:, j + 1] = states[:, j]
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                continue
            t, x = float(self.times[j]), states[idx, j]
            moved = x + self.model.b(t, x) * dt + np.einsum("pik,pk->pi", self.model.a(t, x), z[j, idx]) * np.sqrt(dt)
            left = self.grid.outside(moved)
            states[idx, j + 1] = self.grid.clip(moved)
            exit_step[idx[left]] = j + 1
            alive[idx[left]] = False
        return PathBlock(index, self.start_time, self.times, states, exit_step)

    def map(self, fn: Callable[[PathBlock], T]) -> list[T]:
        """Apply fn to every block; results come back in block order."""
        with ThreadPoolExecutor(max_workers=constants.worker_count()) as executor:
            return list(executor.map(lambda i: fn(self.block(i)), range(self.n_blocks)))


def simulate_paths(
    model: DiffusionModel,
    grid: SpaceTimeGrid,
    start: tuple[float, Sequence[float]],
    cfg: MCConfig | None = None,
    stream_key: int = 0,
) -> PathStream:
    s, x = start
    return PathStream(model, grid, s, x, cfg, stream_key)


@dataclass(frozen=True)
class PathSamples:
    payoff: np.ndarray
    truncated: np.ndarray

    def estimate(self, antithetic: bool) -> MCEstimate:
        return MCEstimate.from_samples(self.payoff, self.truncated, antithetic)


def _concat(stream: PathStream, parts: list[list[PathSamples]]) -> list[PathSamples]:
    """Join per-block samples per policy; antithetic halves are regrouped so pairs line up."""
    out = []
    for per_block in zip(*parts):
        if stream.antithetic:
            first = [np.split(p.payoff, 2)[0] for p in per_block] + [np.split(p.payoff, 2)[1] for p in per_block]
            trunc = [np.split(p.truncated, 2)[0] for p in per_block] + [np.split(p.truncated, 2)[1] for p in per_block]
            out.append(PathSamples(np.concatenate(first), np.concatenate(trunc)))
        else:
            out.append(
                PathSamples(np.concatenate([p.payoff for p in per_block]), np.concatenate([p.truncated for p in per_block]))
            )
    return out


def _stopping_block(block: PathBlock, g: ScalarField, f, alpha: float, policies: Sequence[PolicyRegion]) -> list[PathSamples]:
    cost = block.running_cost(f, alpha)
    rows = np.arange(block.n_paths)
    out = []
    for policy in policies:
        steps, hit = block.stop_steps(policy)
        t = block.times[steps]
        reward = g.sample(t, block.state_at(steps))
        reward = np.where(hit, reward, np.maximum(reward, 0.0))
        payoff = np.exp(-alpha * (t - block.start_time)) * reward + cost[rows, steps]
        out.append(PathSamples(payoff, ~hit))
    return out


def stopping_samples(
    stream: PathStream, g: ScalarField, f: ScalarField | None, alpha: float, policies: Sequence[PolicyRegion]
) -> list[PathSamples]:
    """Per-path payoffs of several stopping rules on the same paths."""
    return _concat(stream, stream.map(lambda block: _stopping_block(block, g, f, alpha, policies)))


def evaluate_stopping_value(
    stream: PathStream, g: ScalarField, f: ScalarField | None, alpha: float, policy: PolicyRegion
) -> MCEstimate:
    """E[int_0^sigma e^{-a t} f dt + e^{-a sigma} g(Z_sigma)] for sigma the policy's hitting time."""
    return stopping_samples(stream, g, f, alpha, [policy])[0].estimate(stream.antithetic)


def _game_block(block: PathBlock, g, h, f, alpha, pairs) -> list[PathSamples]:
    cost = block.running_cost(f, alpha)
    rows = np.arange(block.n_paths)
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def hitting(region):
        if id(region) not in cache:
            cache[id(region)] = block.stop_steps(region)
        return cache[id(region)]

    out = []
    for region_sigma, region_tau in pairs:
        s_steps, s_hit = hitting(region_sigma)
        t_steps, t_hit = hitting(region_tau)
        tau_first = t_hit & (~s_hit | (t_steps <= s_steps))
        sigma_first = s_hit & ~tau_first
        steps = np.where(tau_first, t_steps, np.where(sigma_first, s_steps, block.exit_step))
        t, x = block.times[steps], block.state_at(steps)
        g_at, h_at = g.sample(t, x), h.sample(t, x)
        reward = np.where(tau_first, h_at, np.where(sigma_first, g_at, np.minimum(np.maximum(0.0, g_at), h_at)))
        payoff = np.exp(-alpha * (t - block.start_time)) * reward + cost[rows, steps]
        out.append(PathSamples(payoff, ~(tau_first | sigma_first)))
    return out


def game_samples(stream: PathStream, g, h, f, alpha: float, pairs: Sequence[tuple[PolicyRegion, PolicyRegion]]) -> list[PathSamples]:
    return _concat(stream, stream.map(lambda block: _game_block(block, g, h, f, alpha, pairs)))


def evaluate_game_payoff(
    stream: PathStream,
    g: ScalarField,
    h: ScalarField,
    f: ScalarField | None,
    alpha: float,
    region_sigma: PolicyRegion,
    region_tau: PolicyRegion,
) -> MCEstimate:
    """J(tau, sigma): h is paid when tau <= sigma (ties included), g when sigma comes first."""
    return game_samples(stream, g, h, f, alpha, [(region_sigma, region_tau)])[0].estimate(stream.antithetic)


# checks


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    statistic: float
    bound: float
    stderr: float
    details: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "statistic": self.statistic,
            "bound": self.bound,
            "stderr": self.stderr,
            "details": dict(self.details),
        }


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple[CheckResult, ...]
    negative_controls: tuple[CheckResult, ...] = ()
    scheme_tol: float = 0.0

    @property
    def control_flagged(self) -> bool | None:
        if not self.negative_controls:
            return None
        return not all(c.passed for c in self.negative_controls)

    @property
    def passed(self) -> bool:
        """All checks pass and, when a negative control ran, it was flagged."""
        return all(c.passed for c in self.checks) and self.control_flagged is not False

    def failures(self) -> list[str]:
        failed = [c.name for c in self.checks if not c.passed]
        if self.control_flagged is False:
            failed.append("negative control not flagged")
        return failed

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "scheme_tol": self.scheme_tol,
            "checks": [c.to_dict() for c in self.checks],
            "negative_controls": [c.to_dict() for c in self.negative_controls],
            "negative_control_flagged": self.control_flagged,
            "failures": self.failures(),
        }


def scheme_tolerance(grid: SpaceTimeGrid, constant: float) -> float:
    """C * (max dx + max dt): the allowance for discretization bias."""
    return float(constant) * (grid.max_spacing + float(np.max(grid.dt)))


def _difference(a: PathSamples, b: PathSamples, antithetic: bool) -> MCEstimate:
    return MCEstimate.from_samples(a.payoff - b.payoff, a.truncated, antithetic)


def _log_check(result: CheckResult) -> CheckResult:
    verdict = "pass" if result.passed else "FAIL"
    log.info(f"{result.name}: {verdict} (statistic {result.statistic:.6g}, bound {result.bound:.6g})")
    return result


def check_value_match(
    stream: PathStream,
    value_at_start: float,
    g: ScalarField,
    f: ScalarField | None,
    alpha: float,
    policy: PolicyRegion,
    scheme_tol: float,
    name: str = "value match",
) -> CheckResult:
    est = evaluate_stopping_value(stream, g, f, alpha, policy)
    if est.truncation_rate > 0.5:
        log.warning(f"{name}: {est.truncation_rate:.0%} of paths were truncated before stopping")
    return _value_result(name, est, value_at_start, scheme_tol)


def _value_result(name: str, est: MCEstimate, value: float, scheme_tol: float) -> CheckResult:
    bound = 3.0 * est.stderr + scheme_tol
    gap = abs(est.mean - value)
    return _log_check(
        CheckResult(name, gap <= bound, gap, bound, est.stderr, {"estimate": est.to_dict(), "solver_value": value})
    )


def check_game_value_match(
    stream: PathStream,
    value_at_start: float,
    g: ScalarField,
    h: ScalarField,
    f: ScalarField | None,
    alpha: float,
    region_sigma: PolicyRegion,
    region_tau: PolicyRegion,
    scheme_tol: float,
    name: str = "game value match",
) -> CheckResult:
    est = evaluate_game_payoff(stream, g, h, f, alpha, region_sigma, region_tau)
    return _value_result(name, est, value_at_start, scheme_tol)


def perturbed_policies(region: PolicyRegion, start_time: float, cells: Sequence[int] = (1, 2, 3)) -> list[PolicyRegion]:
    """Dilations and erosions of the region, a fixed-time rule, never stopping and stopping at once."""
    grid = region.grid
    family = [region.dilate(k) for k in cells] + [region.erode(k) for k in cells]
    family.append(PolicyRegion.from_time(grid, 0.5 * (start_time + grid.horizon)))
    family.append(PolicyRegion.nothing(grid))
    family.append(PolicyRegion.everything(grid))
    return family


def check_suboptimality(
    stream: PathStream,
    value_at_start: float,
    g: ScalarField,
    f: ScalarField | None,
    alpha: float,
    region: PolicyRegion,
    scheme_tol: float,
    cells: Sequence[int] = (1, 2, 3),
) -> list[CheckResult]:
    """No tested stopping rule may beat the solver value by more than 3 stderr + scheme_tol."""
    policies = perturbed_policies(region, stream.start_time, cells)
    samples = stopping_samples(stream, g, f, alpha, [region] + policies)
    base = samples[0]
    results = []
    for policy, sample in zip(policies, samples[1:]):
        est = sample.estimate(stream.antithetic)
        bound = value_at_start + 3.0 * est.stderr + scheme_tol
        diff = _difference(sample, base, stream.antithetic)
        results.append(
            _log_check(
                CheckResult(
                    f"suboptimality: {policy.name}",
                    est.mean <= bound,
                    est.mean,
                    bound,
                    est.stderr,
                    {"estimate": est.to_dict(), "difference_to_solver_policy": diff.to_dict()},
                )
            )
        )
    return results


def check_saddle(
    stream: PathStream,
    g: ScalarField,
    h: ScalarField,
    f: ScalarField | None,
    alpha: float,
    region_sigma: PolicyRegion,
    region_tau: PolicyRegion,
    scheme_tol: float,
    cells: Sequence[int] = (1, 2, 3),
) -> list[CheckResult]:
    """
    J(tau, sigma') <= J(tau, sigma) and J(tau, sigma) <= J(tau', sigma) for
    every perturbed sigma' and tau', each judged on per-path differences.
    """
    sigmas = perturbed_policies(region_sigma, stream.start_time, cells)
    taus = perturbed_policies(region_tau, stream.start_time, cells)
    pairs = [(region_sigma, region_tau)] + [(s, region_tau) for s in sigmas] + [(region_sigma, t) for t in taus]
    samples = game_samples(stream, g, h, f, alpha, pairs)
    base = samples[0]
    base_est = base.estimate(stream.antithetic)
    results = []
    for i, (sigma, tau) in enumerate(pairs[1:], start=1):
        diff = _difference(samples[i], base, stream.antithetic)
        bound = 3.0 * diff.stderr + scheme_tol
        if i <= len(sigmas):
            name, statistic = f"saddle stopper: {sigma.name}", diff.mean
        else:
            name, statistic = f"saddle terminator: {tau.name}", -diff.mean
        results.append(
            _log_check(
                CheckResult(
                    name,
                    statistic <= bound,
                    statistic,
                    bound,
                    diff.stderr,
                    {"difference": diff.to_dict(), "saddle_value": base_est.to_dict()},
                )
            )
        )
    return results


def _checkpoint_steps(stream: PathStream, checkpoints: Sequence[float]) -> list[int]:
    """Nearest path steps to the checkpoints after the start; checkpoints past the horizon are rejected."""
    steps = []
    for t in checkpoints:
        if t > stream.times[-1] + TIME_EPS:
            raise ConfigError("mc.checkpoints", f"checkpoint {t:g} lies past the horizon {stream.times[-1]:g}")
        if t > stream.start_time + TIME_EPS:
            steps.append(int(np.argmin(np.abs(stream.times - t))))
    return sorted(set(steps))


def _discounted_value(block: PathBlock, value: ScalarField, alpha: float, steps: np.ndarray) -> np.ndarray:
    t = block.times[steps]
    return np.exp(-alpha * (t - block.start_time)) * value.sample(t, block.state_at(steps))


def check_supermartingale(
    stream: PathStream,
    value: ScalarField,
    alpha: float,
    checkpoints: Sequence[float],
    scheme_tol: float,
    contact: PolicyRegion | None = None,
    name: str = "supermartingale",
) -> list[CheckResult]:
    """
    For consecutive checkpoints t1 < t2 (the start prepended) check
    E[e^{-a t2} v(Z_t2)] <= E[e^{-a t1} v(Z_t1)] + 3 stderr + scheme_tol, paths
    stopped at box exit. With a contact region also check that the value is
    reproduced exactly by stopping at min(checkpoint, first contact).
    """
    steps = [0] + _checkpoint_steps(stream, sorted(checkpoints))

    def per_block(block: PathBlock):
        columns = [_discounted_value(block, value, alpha, np.minimum(s, block.exit_step)) for s in steps]
        stopped = []
        if contact is not None:
            hit_steps, _ = block.stop_steps(contact)
            stopped = [_discounted_value(block, value, alpha, np.minimum(s, hit_steps)) for s in steps[1:]]
        return columns, stopped

    blocks = stream.map(per_block)
    truncated = np.zeros(stream.cfg.n_paths, dtype=bool)

    def gather(index: int, which: int) -> np.ndarray:
        parts = [b[which][index] for b in blocks]
        if stream.antithetic:
            return np.concatenate([np.split(p, 2)[0] for p in parts] + [np.split(p, 2)[1] for p in parts])
        return np.concatenate(parts)

    results = []
    for j in range(1, len(steps)):
        diff = MCEstimate.from_samples(gather(j, 0) - gather(j - 1, 0), truncated, stream.antithetic)
        bound = 3.0 * diff.stderr + scheme_tol
        results.append(
            _log_check(
                CheckResult(
                    f"{name} t={stream.times[steps[j - 1]]:.4g}->{stream.times[steps[j]]:.4g}",
                    diff.mean <= bound,
                    diff.mean,
                    bound,
                    diff.stderr,
                    {"difference": diff.to_dict()},
                )
            )
        )
    if contact is not None:
        start_value = value.at(stream.start_time, stream.start_x)
        for j in range(1, len(steps)):
            est = MCEstimate.from_samples(gather(j - 1, 1), truncated, stream.antithetic)
            gap = abs(est.mean - start_value)
            bound = 3.0 * est.stderr + scheme_tol
            results.append(
                _log_check(
                    CheckResult(
                        f"{name} pre-contact martingale t<={stream.times[steps[j]]:.4g}",
                        gap <= bound,
                        gap,
                        bound,
                        est.stderr,
                        {"estimate": est.to_dict(), "solver_value": start_value},
                    )
                )
            )
    return results


def check_dynkin_formula(
    stream: PathStream,
    resolvent: ScalarField,
    f: ScalarField,
    alpha: float,
    region: PolicyRegion,
    scheme_tol: float,
) -> CheckResult:
    """E[int_0^sigma e^{-a t} f dt + e^{-a sigma} Rf(Z_sigma)] = Rf(z) for sigma the region's hitting time."""

    def per_block(block: PathBlock):
        steps, hit = block.stop_steps(region)
        cost = block.running_cost(f, alpha)[np.arange(block.n_paths), steps]
        return [PathSamples(cost + _discounted_value(block, resolvent, alpha, steps), ~hit)]

    est = _concat(stream, stream.map(per_block))[0].estimate(stream.antithetic)
    return _value_result("resolvent identity", est, resolvent.at(stream.start_time, stream.start_x), scheme_tol)
