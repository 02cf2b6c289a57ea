"""
Reading and writing run artifacts. JSON is written with sorted keys and
without timestamps so that rerunning a config reproduces the files byte for
byte.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from dynkin_vi.constants import MissingArtifacts
from dynkin_vi.game import GameIteration, GameSolution
from dynkin_vi.grid import ScalarField, write_nodal_csv
from dynkin_vi.obstacle import VISolution

log = logging.getLogger(__name__)

SOLUTION_FILE = "solution.npz"
DIAGNOSTICS_FILE = "diagnostics.json"
ORACLE_FILE = "oracle.json"
VERIFICATION_FILE = "verification.json"
REPORT_FILE = "report.json"


def _plain(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path: str | Path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2, default=_plain) + "\n", encoding="utf-8")
    log.info(f"Wrote {path}")
    return path


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifacts(f"{path} does not exist")
    return json.loads(path.read_text(encoding="utf-8"))


def write_field(out_dir: Path, name: str, field: ScalarField | np.ndarray, grid=None) -> Path:
    path = Path(out_dir) / f"{name}.csv"
    if isinstance(field, ScalarField):
        field.to_csv(path)
    else:
        write_nodal_csv(grid, np.asarray(field, dtype=float), path)
    log.info(f"Wrote {path}")
    return path


def write_solution_fields(out_dir: str | Path, solution: VISolution | GameSolution) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(solution, GameSolution):
        grid = solution.phi_bar.grid
        return [
            write_field(out_dir, "w_bar", solution.w_bar),
            write_field(out_dir, "phi_bar", solution.phi_bar),
            write_field(out_dir, "psi_bar", solution.psi_bar),
            write_field(out_dir, "stop_sigma", solution.stop_region_sigma, grid),
            write_field(out_dir, "stop_tau", solution.stop_region_tau, grid),
        ]
    return [write_field(out_dir, "value", solution.value), write_field(out_dir, "contact", solution.contact_field())]


def save_solution(out_dir: str | Path, config_json: str, solution: VISolution | GameSolution) -> Path:
    """Everything `verify --from-artifacts` needs, tagged with the config it came from."""
    path = Path(out_dir) / SOLUTION_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {"config": np.array(config_json)}
    if isinstance(solution, GameSolution):
        arrays.update(
            kind=np.array("game"),
            phi_bar=solution.phi_bar.values,
            psi_bar=solution.psi_bar.values,
            stop_sigma=solution.stop_region_sigma,
            stop_tau=solution.stop_region_tau,
            history=np.array([[s.index, s.delta_phi, s.delta_psi] for s in solution.history]).reshape(-1, 3),
            contact_tol=np.array(solution.contact_tol),
            fixed_point_residual=np.array(solution.fixed_point_residual),
            fixed_point_tol=np.array(solution.fixed_point_tol),
        )
    else:
        arrays.update(
            kind=np.array("stopping"),
            value=solution.value.values,
            contact=solution.contact_mask,
            contact_tol=np.array(solution.contact_tol),
        )
        if solution.vi_residual is not None:
            arrays["vi_residual"] = np.array(solution.vi_residual)
    if solution.resolvent is not None:
        arrays["resolvent"] = solution.resolvent.values
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)
    log.info(f"Wrote {path}")
    return path


def load_solution(out_dir: str | Path, config_json: str, problem) -> VISolution | GameSolution:
    path = Path(out_dir) / SOLUTION_FILE
    if not path.is_file():
        raise MissingArtifacts(f"{path} does not exist; run `solve` first")
    with np.load(path, allow_pickle=False) as data:
        if str(data["config"]) != config_json:
            raise MissingArtifacts(f"{path} was produced by a different config; run `solve` again")
        grid = problem.grid
        resolvent = ScalarField(grid, data["resolvent"]) if "resolvent" in data else None
        if str(data["kind"]) == "game":
            history = tuple(GameIteration(int(i), float(p), float(s)) for i, p, s in data["history"])
            return GameSolution(
                ScalarField(grid, data["phi_bar"]),
                ScalarField(grid, data["psi_bar"]),
                data["stop_sigma"],
                data["stop_tau"],
                history,
                float(data["contact_tol"]),
                float(data["fixed_point_residual"]),
                float(data["fixed_point_tol"]),
                resolvent,
            )
        vi_residual = float(data["vi_residual"]) if "vi_residual" in data else None
        return VISolution(
            ScalarField(grid, data["value"]),
            problem.g,
            data["contact"],
            float(data["contact_tol"]),
            (),
            resolvent,
            vi_residual,
        )
