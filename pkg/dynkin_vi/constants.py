"""
    Loads solver configuration from YAML files.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import List

import yaml


def _env_var_constructor(loader, node):
    """
    Implements a custom YAML tag for loading optional environment
    variables. If the environment variable is set, returns the
    value of it. Otherwise, returns `None`.
    Example usage in the YAML configuration:
        # Worker cap. Set `DYNKIN_VI_THREADS` in the environment to override it.
        app:
            threads: !ENV ['DYNKIN_VI_THREADS', 4]
    """

    default = None

    # Check if the node is a plain string value
    if node.id == "scalar":
        value = loader.construct_scalar(node)
        key = str(value)
    else:
        # The node value is a list
        value = loader.construct_sequence(node)

        if len(value) >= 2:
            # If we have at least two values, then we have both a key and a default value
            default = value[1]
            key = value[0]
        else:
            # Otherwise, we just have a key
            key = value[0]

    return os.getenv(key, default)


yaml.SafeLoader.add_constructor("!ENV", _env_var_constructor)

log = logging.getLogger(__name__)

CONFIG_PATH = Path(
    os.getenv("DYNKIN_VI_CONFIG", Path(__file__).resolve().parent.parent / "config.yml")
)

with open(CONFIG_PATH, encoding="UTF-8") as f:
    _CONFIG_YAML = yaml.safe_load(f)


class YAMLGetter(type):
    """
    Implements a custom metaclass used for accessing
    configuration data by simply accessing class attributes.
    Supports getting configuration from up to two levels
    of nested configuration through `section` and `subsection`.
    `section` specifies the YAML configuration section (or "key")
    in which the configuration lives, and must be set.
    `subsection` is an optional attribute specifying the section
    within the section from which configuration should be loaded.
    Example Usage:
        # config.yml
        penalty:
            inner_tol: 1.0e-10
        # constants.py
        class Penalty(metaclass=YAMLGetter):
            section = "penalty"
        # Usage in Python code
        from dynkin_vi.constants import Penalty
        def converged(step):
            return step < Penalty.inner_tol
    """

    subsection = None

    def __getattr__(cls, name):
        name = name.lower()

        try:
            if cls.subsection is not None:
                return _CONFIG_YAML[cls.section][cls.subsection][name]
            return _CONFIG_YAML[cls.section][name]
        except KeyError:
            dotted_path = ".".join(
                (cls.section, cls.subsection, name)
                if cls.subsection is not None
                else (cls.section, name)
            )
            log.critical(
                f"Tried accessing configuration variable at `{dotted_path}`, but it could not be found."
            )
            raise

    def __getitem__(cls, name):
        return cls.__getattr__(name)

    def __iter__(cls):
        """Return generator of key: value pairs of current constants class' config values."""
        for name in cls.__annotations__:
            yield name, getattr(cls, name)


class App(metaclass=YAMLGetter):
    section = "app"

    log_file: str
    log_level: str
    threads: int


class Commands(metaclass=YAMLGetter):
    section = "commands"

    enabled: List[str]


class Model(metaclass=YAMLGetter):
    section = "model"

    lambda_min: float
    derivative_step: float


class Penalty(metaclass=YAMLGetter):
    section = "penalty"

    eps_schedule: List[float]
    inner_tol: float
    max_inner_iters: int
    monotone_slack: float
    contact_rtol: float


class Game(metaclass=YAMLGetter):
    section = "game"

    outer_tol: float
    max_outer_iters: int


class Oracle(metaclass=YAMLGetter):
    section = "oracle"

    omega: float
    tol: float
    max_sweeps: int


class MonteCarlo(metaclass=YAMLGetter):
    section = "mc"

    n_paths: int
    block_size: int
    seed: int
    antithetic: bool
    dt_fraction: float
    scheme_constant: float
    vi_trials: int


def worker_count() -> int:
    """Worker cap for thread pools; `DYNKIN_VI_THREADS` wins over config.yml."""
    try:
        return max(1, int(App.threads))
    except (TypeError, ValueError):
        log.warning(f"Ignoring non-integer thread count {App.threads!r}")
        return 1


class DynkinVIException(Exception):
    """Base class for every error the solver raises on purpose."""

    kind = "error"
    exit_code = 3

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ConfigError(DynkinVIException):
    kind = "config"
    exit_code = 2

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message

    def to_dict(self) -> dict:
        return {"error": self.kind, "key": self.key, "message": self.message}


def setting(key: str, value, kind: type = float):
    """Convert one config value to `kind`, raising ConfigError on the key when it does not fit."""
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected true or false, got {value!r}")
    try:
        if isinstance(value, bool):
            raise TypeError
        converted = kind(value)
        if kind is int and float(value) != converted:
            raise ValueError
    except (TypeError, ValueError):
        expected = "an integer" if kind is int else "a number"
        raise ConfigError(key, f"expected {expected}, got {value!r}") from None
    return converted


def setting_list(key: str, value, kind: type = float) -> tuple:
    """A list setting, each entry converted by `setting`."""
    if isinstance(value, (str, bytes, dict)):
        raise ConfigError(key, f"expected a list, got {value!r}")
    try:
        items = tuple(value)
    except TypeError:
        raise ConfigError(key, f"expected a list, got {value!r}") from None
    return tuple(setting(f"{key}[{i}]", item, kind) for i, item in enumerate(items))


class ModelRejected(DynkinVIException):
    kind = "model"
    exit_code = 2


class ModeMismatch(DynkinVIException):
    kind = "density-mode"
    exit_code = 2


class InvalidDensity(DynkinVIException):
    kind = "density"
    exit_code = 2


class AssemblyError(DynkinVIException):
    kind = "assembly"


class PenaltyDivergence(DynkinVIException):
    kind = "penalty-divergence"

    def __init__(self, slice_index: int, message: str):
        super().__init__(f"slice {slice_index}: {message}")
        self.slice_index = slice_index

    def to_dict(self) -> dict:
        return {"error": self.kind, "slice": self.slice_index, "message": str(self)}


class SchemeError(DynkinVIException):
    kind = "scheme"


class GameDivergence(DynkinVIException):
    kind = "game-divergence"


class RelaxationDivergence(DynkinVIException):
    kind = "relaxation-divergence"


class StartOutsideBox(DynkinVIException):
    kind = "start-outside-box"
    exit_code = 2


class MissingArtifacts(DynkinVIException):
    kind = "missing-artifacts"
    exit_code = 4
