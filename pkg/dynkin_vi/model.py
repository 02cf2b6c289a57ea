"""
Time-inhomogeneous Ito diffusions dX = b(t, X) dt + a(t, X) dB and the
quantities the Dirichlet form needs: A = a a^T / 2, the generator drift
mu_i = b_i - sum_j dA_ji/dx_j and a symmetrizing density rho solving
A grad(rho) = rho mu.

Coefficients come from a small set of named families so that a model can be
written down in a JSON config and evaluated deterministically:

    constant   b = c,                a = C (full n x m matrix)
    affine     b_i = c_i + s_i x_i,  a = diag(c_i + s_i x_i)
    geometric  b_i = r_i x_i,        a = diag(sigma_i x_i)

Every family takes an optional `time_rate` kappa that scales the coefficient
by (1 + kappa t).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Union

import numpy as np

from dynkin_vi import constants
from dynkin_vi.constants import InvalidDensity, ModelRejected, ModeMismatch

if TYPE_CHECKING:
    from dynkin_vi.grid import SpaceTimeGrid

log = logging.getLogger(__name__)

COEFFICIENT_FAMILIES = ("constant", "affine", "geometric")


def _time_factor(time_rate: float, t: float) -> float:
    return 1.0 + time_rate * t


@dataclass(frozen=True)
class Drift:
    """Drift coefficient b(t, x) of one of the named families."""

    family: str
    offset: tuple[float, ...]
    slope: tuple[float, ...]
    time_rate: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.offset)

    @property
    def space_constant(self) -> bool:
        return not any(self.slope)

    @classmethod
    def from_dict(cls, spec: dict, dim: int) -> "Drift":
        family = spec.get("family")
        time_rate = float(spec.get("time_rate", 0.0))
        if family == "constant":
            offset = _vector(spec["value"], dim, "value")
            slope = (0.0,) * dim
        elif family == "affine":
            offset = _vector(spec["offset"], dim, "offset")
            slope = _vector(spec["slope"], dim, "slope")
        elif family == "geometric":
            offset = (0.0,) * dim
            slope = _vector(spec["rate"], dim, "rate")
        else:
            raise ValueError(f"unknown drift family {family!r}, expected one of {COEFFICIENT_FAMILIES}")
        return cls(family, offset, slope, time_rate)

    def to_dict(self) -> dict:
        spec: dict = {"family": self.family}
        if self.family == "constant":
            spec["value"] = list(self.offset)
        elif self.family == "affine":
            spec["offset"] = list(self.offset)
            spec["slope"] = list(self.slope)
        else:
            spec["rate"] = list(self.slope)
        if self.time_rate:
            spec["time_rate"] = self.time_rate
        return spec

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        values = np.asarray(self.offset) + np.asarray(self.slope) * x
        return values * _time_factor(self.time_rate, t)


@dataclass(frozen=True)
class Diffusion:
    """Diffusion coefficient a(t, x); `matrix` is used by the constant family only."""

    family: str
    matrix: tuple[tuple[float, ...], ...] = ()
    offset: tuple[float, ...] = ()
    slope: tuple[float, ...] = ()
    time_rate: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.matrix) if self.family == "constant" else len(self.offset)

    @property
    def noise_dim(self) -> int:
        return len(self.matrix[0]) if self.family == "constant" else len(self.offset)

    @property
    def space_constant(self) -> bool:
        return self.family == "constant" or not any(self.slope)

    @classmethod
    def from_dict(cls, spec: dict, dim: int) -> "Diffusion":
        family = spec.get("family")
        time_rate = float(spec.get("time_rate", 0.0))
        if family == "constant":
            rows = spec["value"]
            if np.isscalar(rows):
                rows = [[rows]]
            elif dim == 1 and all(np.isscalar(v) for v in rows):
                rows = [rows]
            matrix = tuple(tuple(float(v) for v in row) for row in rows)
            if len(matrix) != dim or len({len(row) for row in matrix}) != 1:
                raise ValueError(f"diffusion value must be a {dim} x m matrix")
            return cls(family, matrix=matrix, time_rate=time_rate)
        if family == "affine":
            return cls(
                family,
                offset=_vector(spec["offset"], dim, "offset"),
                slope=_vector(spec["slope"], dim, "slope"),
                time_rate=time_rate,
            )
        if family == "geometric":
            return cls(
                family,
                offset=(0.0,) * dim,
                slope=_vector(spec["volatility"], dim, "volatility"),
                time_rate=time_rate,
            )
        raise ValueError(f"unknown diffusion family {family!r}, expected one of {COEFFICIENT_FAMILIES}")

    def to_dict(self) -> dict:
        spec: dict = {"family": self.family}
        if self.family == "constant":
            spec["value"] = [list(row) for row in self.matrix]
        elif self.family == "affine":
            spec["offset"] = list(self.offset)
            spec["slope"] = list(self.slope)
        else:
            spec["volatility"] = list(self.slope)
        if self.time_rate:
            spec["time_rate"] = self.time_rate
        return spec

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        scale = _time_factor(self.time_rate, t)
        if self.family == "constant":
            return np.broadcast_to(np.asarray(self.matrix) * scale, (x.shape[0],) + np.shape(self.matrix))
        diagonal = (np.asarray(self.offset) + np.asarray(self.slope) * x) * scale
        out = np.zeros(x.shape + (x.shape[1],))
        idx = np.arange(x.shape[1])
        out[:, idx, idx] = diagonal
        return out


def _vector(values, dim: int, name: str) -> tuple[float, ...]:
    values = [values] if np.isscalar(values) else list(values)
    if len(values) != dim:
        raise ValueError(f"{name} must have {dim} entries, got {len(values)}")
    return tuple(float(v) for v in values)


class DensityMode(str, Enum):
    CLOSED_FORM = "constant-coefficient-closed-form"
    USER = "user-supplied"
    UNIT = "unit"


@dataclass(frozen=True)
class PowerDensity:
    """rho(x) = prod_i x_i^p_i; symmetrizes geometric Brownian motion with p = 2(r - sigma^2)/sigma^2."""

    exponent: tuple[float, ...]

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.prod(np.power(np.atleast_2d(x), np.asarray(self.exponent)), axis=1)

    def to_dict(self) -> dict:
        return {"family": "power", "exponent": list(self.exponent)}


@dataclass(frozen=True)
class ExponentialDensity:
    """rho(x) = exp(c . x)."""

    coefficients: tuple[float, ...]

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.exp(np.atleast_2d(x) @ np.asarray(self.coefficients))

    def to_dict(self) -> dict:
        return {"family": "exponential", "coefficients": list(self.coefficients)}


DENSITY_FAMILIES = {"power": PowerDensity, "exponential": ExponentialDensity}


def density_from_dict(spec: dict, dim: int):
    family = spec.get("family")
    if family == "power":
        return PowerDensity(_vector(spec["exponent"], dim, "exponent"))
    if family == "exponential":
        return ExponentialDensity(_vector(spec["coefficients"], dim, "coefficients"))
    raise ValueError(f"unknown density family {family!r}, expected one of {sorted(DENSITY_FAMILIES)}")


UserDensity = Union[PowerDensity, ExponentialDensity, Callable[[float, np.ndarray], np.ndarray]]


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """
    Immutable description of dX = b dt + a dB on R^dim, dim in {1, 2}.

    Evaluation is pure, so one instance may be shared by concurrent solves and
    simulations.
    """

    dim: int
    drift: Drift
    diffusion: Diffusion
    alpha: float
    density_mode: DensityMode = DensityMode.UNIT
    user_density: UserDensity | None = None
    lambda_min: float = field(default_factory=lambda: float(constants.Model.lambda_min))

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ModelRejected(f"state dimension must be 1 or 2, got {self.dim}")
        if self.drift.dim != self.dim or self.diffusion.dim != self.dim:
            raise ModelRejected(
                f"coefficient dimensions ({self.drift.dim}, {self.diffusion.dim}) do not match dim={self.dim}"
            )
        if not self.alpha > 0:
            raise ModelRejected(f"discount alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "density_mode", DensityMode(self.density_mode))

    @property
    def noise_dim(self) -> int:
        return self.diffusion.noise_dim

    @property
    def space_constant(self) -> bool:
        return self.drift.space_constant and self.diffusion.space_constant

    def b(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.drift(t, x)

    def a(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.diffusion(t, x)

    def covariance(self, t: float, x: np.ndarray) -> np.ndarray:
        """A = a a^T / 2, shape (N, dim, dim)."""
        a = self.a(t, x)
        return 0.5 * np.einsum("pik,pjk->pij", a, a)

    def covariance_divergence(self, t: float, x: np.ndarray, step: float | None = None) -> np.ndarray:
        """(div A)_i = sum_j dA_ji/dx_j by central differences."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = float(constants.Model.derivative_step) if step is None else step
        out = np.zeros_like(x)
        for j in range(self.dim):
            shift = np.zeros(self.dim)
            shift[j] = step
            dA = (self.covariance(t, x + shift) - self.covariance(t, x - shift)) / (2.0 * step)
            out += dA[:, j, :]
        return out

    def generator_drift(self, t: float, x: np.ndarray, step: float | None = None) -> np.ndarray:
        """mu = b - div A, the first-order coefficient of the generator in divergence form."""
        return self.b(t, x) - self.covariance_divergence(t, x, step)

    def validate(self, grid: "SpaceTimeGrid") -> None:
        """Reject the model unless A is symmetric and uniformly non-degenerate on every grid node."""
        worst_asym = 0.0
        worst_eig = np.inf
        for k in range(grid.n_time):
            _, A = slice_coefficients(self, grid, k)
            worst_asym = max(worst_asym, float(np.max(np.abs(A - np.swapaxes(A, 1, 2)))))
            worst_eig = min(worst_eig, float(np.min(np.linalg.eigvalsh(A))))
        if worst_asym > 1e-12:
            raise ModelRejected(f"A = a a^T / 2 is not symmetric (max asymmetry {worst_asym:.3e})")
        if worst_eig < self.lambda_min:
            raise ModelRejected(
                f"smallest eigenvalue of A on the grid is {worst_eig:.3e}, below lambda_min={self.lambda_min:.1e}"
            )
        log.debug(f"Model accepted: min eigenvalue {worst_eig:.3e}")


def slice_coefficients(model: DiffusionModel, grid: "SpaceTimeGrid", k: int) -> tuple[np.ndarray, np.ndarray]:
    """Drift and A at the nodes of time slice k."""
    t = float(grid.t_nodes[k])
    b = model.b(t, grid.points)
    A = model.covariance(t, grid.points)
    return b, A


class DensityProvenance(str, Enum):
    CLOSED_FORM = "closed-form"
    USER = "user-supplied"
    UNIT = "unit"


@dataclass(frozen=True, eq=False)
class SymmetrizingDensity:
    rho: Callable[[float, np.ndarray], np.ndarray]
    provenance: DensityProvenance

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.rho(t, np.atleast_2d(x)), dtype=float)

    def validate(self, grid: "SpaceTimeGrid") -> None:
        for t in grid.t_nodes:
            values = self(float(t), grid.points)
            bad = ~np.isfinite(values) | (values <= 0.0)
            if np.any(bad):
                x = grid.points[np.argmax(bad)]
                raise InvalidDensity(f"density is not positive at t={t:.6g}, x={x.tolist()}")


def build_density(model: DiffusionModel, grid: "SpaceTimeGrid" | None = None) -> SymmetrizingDensity:
    """
    Return the symmetrizing density for the model's density mode.

    In closed-form mode the coefficients must be constant in space and
    rho(t, x) = exp((A(t)^-1 b(t)) . x). When a grid is given every node is
    sampled and a non-positive value raises InvalidDensity.
    """
    mode = model.density_mode
    if mode is DensityMode.CLOSED_FORM:
        if not model.space_constant:
            raise ModeMismatch(
                f"closed-form density needs space-constant coefficients, got drift "
                f"{model.drift.family!r} and diffusion {model.diffusion.family!r}"
            )
        origin = np.zeros((1, model.dim))

        def rho(t: float, x: np.ndarray) -> np.ndarray:
            exponent = np.linalg.solve(model.covariance(t, origin)[0], model.b(t, origin)[0])
            return np.exp(np.atleast_2d(x) @ exponent)

        density = SymmetrizingDensity(rho, DensityProvenance.CLOSED_FORM)
    elif mode is DensityMode.USER:
        if model.user_density is None:
            raise ModeMismatch("user-supplied density mode requires a density")
        density = SymmetrizingDensity(model.user_density, DensityProvenance.USER)
    else:
        density = SymmetrizingDensity(
            lambda t, x: np.ones(np.atleast_2d(x).shape[0]), DensityProvenance.UNIT
        )
    if grid is not None:
        density.validate(grid)
    return density


@dataclass(frozen=True)
class DriftConsistencyReport:
    residual: float
    tolerance: float
    worst_time: float
    worst_point: tuple[float, ...]

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst_time": self.worst_time,
            "worst_point": list(self.worst_point),
        }


def drift_consistency_check(
    model: DiffusionModel,
    density: SymmetrizingDensity,
    grid: "SpaceTimeGrid",
    step: float | None = None,
    rtol: float = 1e-6,
) -> DriftConsistencyReport:
    """
    max over grid nodes of |A grad(rho) - rho mu|, grad(rho) by central differences.

    The tolerance is rtol * (1 + max |rho mu|); a report over tolerance flags a
    density that does not symmetrize the generator.
    """
    step = float(constants.Model.derivative_step) if step is None else step
    residual, scale = 0.0, 0.0
    worst_time, worst_point = float(grid.t_nodes[0]), tuple(grid.points[0])
    for t in grid.t_nodes:
        t = float(t)
        x = grid.points
        grad = np.zeros_like(x)
        for j in range(model.dim):
            shift = np.zeros(model.dim)
            shift[j] = step
            grad[:, j] = (density(t, x + shift) - density(t, x - shift)) / (2.0 * step)
        rho_mu = density(t, x)[:, None] * model.generator_drift(t, x, step)
        gap = np.abs(np.einsum("pij,pj->pi", model.covariance(t, x), grad) - rho_mu).max(axis=1)
        scale = max(scale, float(np.abs(rho_mu).max()))
        if gap.max() > residual:
            residual = float(gap.max())
            worst_time, worst_point = t, tuple(float(v) for v in x[int(np.argmax(gap))])
    return DriftConsistencyReport(residual, rtol * (1.0 + scale), worst_time, worst_point)
