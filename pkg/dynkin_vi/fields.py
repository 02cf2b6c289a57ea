"""
Named analytic families for obstacles, holding costs and separability
witnesses. A field spec is a JSON object with a `family` key, or a string
naming an entry of the problem's `fields` block.

    constant  {"value": c}
    affine    {"offset": c, "slope": [s1, ...], "time_slope": k}   c + s.x + k t
    put       {"strike": K, "weights": [w1, ...]}                  (K - w.x)^+
    call      {"strike": K, "weights": [w1, ...]}                  (w.x - K)^+
    shifted   {"base": spec, "shift": d}                           base + d
    scaled    {"base": spec, "factor": c}                          c * base
    sum       {"terms": [spec, ...]}
    max / min {"terms": [spec, ...]}                               pointwise
"""
from __future__ import annotations

from typing import Callable, Mapping, Union

import numpy as np

from dynkin_vi.constants import ConfigError, setting
from dynkin_vi.grid import ScalarField, SpaceTimeGrid

FieldSpec = Union[str, Mapping]
Evaluator = Callable[[float, np.ndarray], np.ndarray]

_FAMILIES: dict[str, Callable[..., Evaluator]] = {}


def family(name: str):
    def register(builder):
        _FAMILIES[name] = builder
        return builder

    return register


def _weights(spec: Mapping, dim: int, key: str) -> np.ndarray:
    weights = spec.get("weights")
    if weights is None:
        return np.full(dim, 1.0 / dim)
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    if weights.size != dim:
        raise ConfigError(f"{key}.weights", f"expected {dim} entries, got {weights.size}")
    return weights


@family("constant")
def _constant(spec, dim, key, resolve) -> Evaluator:
    value = setting(f"{key}.value", spec["value"])
    return lambda t, x: np.full(x.shape[0], value)


@family("affine")
def _affine(spec, dim, key, resolve) -> Evaluator:
    offset = setting(f"{key}.offset", spec.get("offset", 0.0))
    slope = np.atleast_1d(np.asarray(spec.get("slope", [0.0] * dim), dtype=float))
    if slope.size != dim:
        raise ConfigError(f"{key}.slope", f"expected {dim} entries, got {slope.size}")
    time_slope = setting(f"{key}.time_slope", spec.get("time_slope", 0.0))
    return lambda t, x: offset + x @ slope + time_slope * t


@family("put")
def _put(spec, dim, key, resolve) -> Evaluator:
    strike = setting(f"{key}.strike", spec["strike"])
    weights = _weights(spec, dim, key)
    return lambda t, x: np.maximum(strike - x @ weights, 0.0)


@family("call")
def _call(spec, dim, key, resolve) -> Evaluator:
    strike = setting(f"{key}.strike", spec["strike"])
    weights = _weights(spec, dim, key)
    return lambda t, x: np.maximum(x @ weights - strike, 0.0)


@family("shifted")
def _shifted(spec, dim, key, resolve) -> Evaluator:
    base = resolve(spec["base"], f"{key}.base")
    shift = setting(f"{key}.shift", spec["shift"])
    return lambda t, x: base(t, x) + shift


@family("scaled")
def _scaled(spec, dim, key, resolve) -> Evaluator:
    base = resolve(spec["base"], f"{key}.base")
    factor = setting(f"{key}.factor", spec["factor"])
    return lambda t, x: factor * base(t, x)


def _terms(spec, key, resolve) -> list[Evaluator]:
    terms = spec.get("terms")
    if not terms:
        raise ConfigError(f"{key}.terms", "needs at least one term")
    return [resolve(term, f"{key}.terms[{i}]") for i, term in enumerate(terms)]


@family("sum")
def _sum(spec, dim, key, resolve) -> Evaluator:
    terms = _terms(spec, key, resolve)
    return lambda t, x: np.sum([term(t, x) for term in terms], axis=0)


@family("max")
def _max(spec, dim, key, resolve) -> Evaluator:
    terms = _terms(spec, key, resolve)
    return lambda t, x: np.max([term(t, x) for term in terms], axis=0)


@family("min")
def _min(spec, dim, key, resolve) -> Evaluator:
    terms = _terms(spec, key, resolve)
    return lambda t, x: np.min([term(t, x) for term in terms], axis=0)


def families() -> list[str]:
    return sorted(_FAMILIES)


def compile_field(spec: FieldSpec, dim: int, named: Mapping[str, FieldSpec] | None = None, key: str = "field") -> Evaluator:
    """Turn a field spec into a function (t, points) -> values, resolving named references."""
    named = named or {}

    def resolve(spec: FieldSpec, key: str, seen: tuple[str, ...] = ()) -> Evaluator:
        if isinstance(spec, str):
            if spec not in named:
                raise ConfigError(key, f"unknown field reference {spec!r}")
            if spec in seen:
                raise ConfigError(key, f"circular field reference {' -> '.join(seen + (spec,))}")
            return resolve(named[spec], f"fields.{spec}", seen + (spec,))
        if not isinstance(spec, Mapping):
            raise ConfigError(key, "field spec must be an object or a field name")
        name = spec.get("family")
        if name not in _FAMILIES:
            raise ConfigError(f"{key}.family", f"unknown field family {name!r}, expected one of {families()}")
        try:
            return _FAMILIES[name](spec, dim, key, lambda s, k: resolve(s, k, seen))
        except KeyError as e:
            raise ConfigError(f"{key}.{e.args[0]}", "missing required parameter") from None
        except (TypeError, ValueError) as e:
            raise ConfigError(key, str(e)) from None

    return resolve(spec, key)


def evaluate_field(
    spec: FieldSpec, grid: SpaceTimeGrid, named: Mapping[str, FieldSpec] | None = None, key: str = "field"
) -> ScalarField:
    return ScalarField.from_function(grid, compile_field(spec, grid.dim, named, key))
