"""
Space-time grids and the fields that live on them.

A SpaceTimeGrid is a truncated time window [0, T] times a tensor-product
spatial mesh. Spatial nodes are flattened in C order (the last axis varies
fastest), so a field is a (n_time, n_space) array.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy import ndimage

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from dynkin_vi.model import SymmetrizingDensity


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    t_nodes: np.ndarray
    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        t_nodes = np.asarray(self.t_nodes, dtype=float)
        axes = tuple(np.asarray(axis, dtype=float) for axis in self.axes)
        if t_nodes.ndim != 1 or t_nodes.size < 2:
            raise ValueError("grid needs at least 2 time nodes")
        if np.any(np.diff(t_nodes) <= 0):
            raise ValueError("time nodes must be strictly increasing")
        if not 1 <= len(axes) <= 2:
            raise ValueError(f"spatial dimension must be 1 or 2, got {len(axes)}")
        for d, axis in enumerate(axes):
            if axis.ndim != 1 or axis.size < 3:
                raise ValueError(f"axis {d} needs at least 3 nodes")
            if np.any(np.diff(axis) <= 0):
                raise ValueError(f"axis {d} nodes must be strictly increasing")
        t_nodes.flags.writeable = False
        for axis in axes:
            axis.flags.writeable = False
        object.__setattr__(self, "t_nodes", t_nodes)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, t_max: float, t_steps: int, bounds: Sequence[tuple[float, float, int]]) -> "SpaceTimeGrid":
        """Uniform grid: `t_steps` steps on [0, t_max] and (min, max, nodes) per axis."""
        if t_steps < 1:
            raise ValueError("t_steps must be at least 1")
        return cls(
            np.linspace(0.0, t_max, t_steps + 1),
            tuple(np.linspace(lo, hi, int(n)) for lo, hi, n in bounds),
        )

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(axis.size for axis in self.axes)

    @property
    def n_space(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_time(self) -> int:
        return self.t_nodes.size

    @property
    def horizon(self) -> float:
        return float(self.t_nodes[-1])

    @cached_property
    def dt(self) -> np.ndarray:
        return np.diff(self.t_nodes)

    @cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        points.flags.writeable = False
        return points

    @cached_property
    def multi_index(self) -> np.ndarray:
        return np.stack(np.unravel_index(np.arange(self.n_space), self.shape), axis=1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = self.multi_index
        upper = np.asarray(self.shape) - 1
        return np.any((idx == 0) | (idx == upper), axis=1)

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def parity(self) -> np.ndarray:
        """Red/black colouring of the nodes; neighbours along an axis differ."""
        return self.multi_index.sum(axis=1) % 2

    def spacing(self, axis: int) -> np.ndarray:
        return np.diff(self.axes[axis])

    @cached_property
    def dual_lengths(self) -> tuple[np.ndarray, ...]:
        """Length of each node's dual cell along every axis (half cells on the boundary)."""
        out = []
        for axis in self.axes:
            h = np.diff(axis)
            dual = np.zeros(axis.size)
            dual[:-1] += 0.5 * h
            dual[1:] += 0.5 * h
            out.append(dual)
        return tuple(out)

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        volumes = np.ones(self.n_space)
        for d, dual in enumerate(self.dual_lengths):
            volumes *= dual[self.multi_index[:, d]]
        return volumes

    def weights(self, density: "SymmetrizingDensity") -> np.ndarray:
        """Discrete measure m per time slice: dual-cell volume times rho, shape (n_time, n_space)."""
        return np.stack([self.cell_volumes * density(float(t), self.points) for t in self.t_nodes])

    @property
    def max_spacing(self) -> float:
        return max(float(np.max(np.diff(axis))) for axis in self.axes)

    def contains(self, x: Sequence[float]) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(all(axis[0] <= xi <= axis[-1] for axis, xi in zip(self.axes, x)))

    def clip(self, x: np.ndarray) -> np.ndarray:
        lo = np.array([axis[0] for axis in self.axes])
        hi = np.array([axis[-1] for axis in self.axes])
        return np.clip(x, lo, hi)

    def outside(self, x: np.ndarray) -> np.ndarray:
        lo = np.array([axis[0] for axis in self.axes])
        hi = np.array([axis[-1] for axis in self.axes])
        return np.any((x < lo) | (x > hi), axis=-1)

    def to_dict(self) -> dict:
        return {"t_nodes": self.t_nodes.tolist(), "axes": [axis.tolist() for axis in self.axes]}


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Values of a function of (t, x) on every node of a grid."""

    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        expected = (self.grid.n_time, self.grid.n_space)
        if values.shape != expected:
            raise ValueError(f"field shape {values.shape} does not match grid {expected}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, fn: Callable[[float, "NDArray"], "NDArray"]) -> "ScalarField":
        return cls(grid, np.stack([np.broadcast_to(fn(float(t), grid.points), (grid.n_space,)) for t in grid.t_nodes]))

    @classmethod
    def constant(cls, grid: SpaceTimeGrid, value: float) -> "ScalarField":
        return cls(grid, np.full((grid.n_time, grid.n_space), float(value)))

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "ScalarField":
        return cls.constant(grid, 0.0)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def _other(self, other) -> np.ndarray | float:
        if isinstance(other, ScalarField):
            if other.grid is not self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other) -> "ScalarField":
        return self.with_values(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other) -> "ScalarField":
        return self.with_values(self.values - self._other(other))

    def __rsub__(self, other) -> "ScalarField":
        return self.with_values(self._other(other) - self.values)

    def __neg__(self) -> "ScalarField":
        return self.with_values(-self.values)

    def __mul__(self, other) -> "ScalarField":
        return self.with_values(self.values * self._other(other))

    __rmul__ = __mul__

    def maximum(self, other) -> "ScalarField":
        return self.with_values(np.maximum(self.values, self._other(other)))

    def minimum(self, other) -> "ScalarField":
        return self.with_values(np.minimum(self.values, self._other(other)))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def max_abs_diff(self, other: "ScalarField") -> float:
        return float(np.max(np.abs(self.values - self._other(other))))

    def sample(self, t: np.ndarray, x: np.ndarray, order: int = 1) -> np.ndarray:
        """
        Interpolate at times `t` (shape S) and points `x` (shape S + (dim,)).

        order=1 is multilinear in (t, x), order=0 takes the nearest node.
        Points outside the grid are clamped to it.
        """
        return sample_nodal(self.grid, self.values, t, x, order)

    def at(self, t: float, x: Sequence[float]) -> float:
        return float(self.sample(np.array([t]), np.asarray(x, dtype=float)[None, :])[0])

    def to_csv(self, path: str | Path) -> None:
        write_nodal_csv(self.grid, self.values, path)


def sample_nodal(grid: SpaceTimeGrid, values: np.ndarray, t, x, order: int = 1) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    coords = [np.interp(t.ravel(), grid.t_nodes, np.arange(grid.n_time))]
    flat_x = x.reshape(-1, grid.dim)
    for d, axis in enumerate(grid.axes):
        coords.append(np.interp(flat_x[:, d], axis, np.arange(axis.size)))
    table = np.asarray(values, dtype=float).reshape((grid.n_time,) + grid.shape)
    out = ndimage.map_coordinates(table, np.vstack(coords), order=order, mode="nearest")
    return out.reshape(t.shape)


def write_nodal_csv(grid: SpaceTimeGrid, values: np.ndarray, path: str | Path) -> None:
    """CSV with columns t, x1[, x2], value; floats carry 17 significant digits."""
    t = np.repeat(grid.t_nodes, grid.n_space)
    x = np.tile(grid.points, (grid.n_time, 1))
    table = np.column_stack([t, x, np.asarray(values, dtype=float).ravel()])
    header = ",".join(["t"] + [f"x{d + 1}" for d in range(grid.dim)] + ["value"])
    np.savetxt(path, table, delimiter=",", fmt="%.17g", header=header, comments="")
