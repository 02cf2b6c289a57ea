"""
Tests for problem configs: parsing, validation, overrides and the end-to-end
solve / verify path on small grids.
"""

import copy

import numpy as np
import pytest

from dynkin_vi.constants import ConfigError, StartOutsideBox
from dynkin_vi.game import GameSolution
from dynkin_vi.obstacle import VISolution
from dynkin_vi.problem import ProblemConfig, load_problem

from tests.conftest import PROBLEMS_DIR, load_problem_spec

SHIPPED = sorted(path.stem for path in PROBLEMS_DIR.glob("*.json"))


def config_error(spec):
    with pytest.raises(ConfigError) as info:
        ProblemConfig.from_dict(spec)
    return info.value


class TestParsing:
    """Configs are parsed strictly and canonicalized."""

    @pytest.mark.parametrize("name", SHIPPED)
    def test_shipped_problems_parse(self, name):
        config = ProblemConfig.from_dict(load_problem_spec(name))
        assert config.name == name

    @pytest.mark.parametrize("name", SHIPPED)
    def test_canonical_form_is_stable(self, name):
        config = ProblemConfig.from_dict(load_problem_spec(name))
        again = ProblemConfig.from_dict(config.to_dict())
        assert again.canonical_json() == config.canonical_json()

    def test_defaults_fill_missing_blocks(self):
        spec = load_problem_spec("symmetric_game")
        config = ProblemConfig.from_dict(spec)
        assert config.penalty.eps_schedule
        assert config.game_config().outer_tol > 0

    def test_wrong_schema(self):
        spec = load_problem_spec("put")
        spec["schema"] = "dynkin-vi/0"
        assert config_error(spec).key == "schema"

    def test_unknown_key_is_named(self):
        spec = load_problem_spec("put")
        spec["model"]["colour"] = "blue"
        assert config_error(spec).key == "model.colour"

    def test_missing_key_is_named(self):
        spec = load_problem_spec("put")
        del spec["grid"]["t_max"]
        assert config_error(spec).key == "grid.t_max"

    def test_game_needs_upper_obstacle(self):
        spec = load_problem_spec("put_game")
        del spec["problem"]["h"]
        assert config_error(spec).key == "problem.h"

    def test_stopping_takes_no_upper_obstacle(self):
        spec = load_problem_spec("put")
        spec["problem"]["h"] = "payoff"
        assert config_error(spec).key == "problem.h"

    def test_unknown_density_mode(self):
        spec = load_problem_spec("put")
        spec["model"]["density_mode"] = "guess"
        assert config_error(spec).key == "model.density_mode"

    def test_unresolved_field_reference(self):
        spec = load_problem_spec("put")
        spec["problem"]["g"] = "missing"
        assert config_error(spec).key == "problem.g"

    def test_too_few_nodes(self):
        spec = load_problem_spec("put")
        spec["grid"]["axes"][0]["nodes"] = 2
        assert config_error(spec).key == "grid.axes[0].nodes"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{\"schema\": ", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid JSON"):
            ProblemConfig.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            ProblemConfig.load(tmp_path / "nope.json")
        assert info.value.key == "--config"

    def test_overrides(self):
        config = ProblemConfig.from_dict(load_problem_spec("put")).with_overrides(seed=3, paths=500, out="elsewhere")
        assert (config.mc.seed, config.mc.n_paths, config.output_dir) == (3, 500, "elsewhere")

    def test_path_override_is_validated(self):
        config = ProblemConfig.from_dict(load_problem_spec("put"))
        with pytest.raises(ConfigError):
            config.with_overrides(paths=10)


class TestBuild:
    """Building evaluates the model and fields and rejects bad combinations."""

    def test_dimension_mismatch(self, write_config):
        spec = load_problem_spec("put")
        spec["grid"]["axes"].append({"min": 0.0, "max": 1.0, "nodes": 5})
        with pytest.raises(ConfigError) as info:
            load_problem(write_config(spec))
        assert info.value.key in {"grid.axes", "fields.payoff"}

    def test_crossing_game_obstacles(self, write_config):
        spec = load_problem_spec("put_game")
        spec["fields"]["cancellation"]["shift"] = -0.05
        with pytest.raises(ConfigError) as info:
            load_problem(write_config(spec))
        assert info.value.key == "problem.h"

    def test_fields_are_evaluated(self, small_put_spec, write_config):
        problem = load_problem(write_config(small_put_spec))
        assert problem.kind == "stopping"
        assert problem.g.at(0.0, [0.5]) == pytest.approx(0.5)
        assert problem.h is None and problem.f is None


class TestSolve:
    """Small end-to-end runs."""

    def test_stopping_solution_and_diagnostics(self, small_put_spec, write_config):
        problem = load_problem(write_config(small_put_spec))
        solution = problem.solve()
        assert isinstance(solution, VISolution)
        assert solution.vi_residual is not None and solution.vi_residual >= -1e-6
        report = problem.diagnostics(solution)
        assert report["density"] == "user-supplied"
        assert report["drift_consistency"]["passed"]
        assert report["start_values"][0]["value"] > 0.0

    def test_oracle_comparison(self, small_put_spec, write_config):
        problem = load_problem(write_config(small_put_spec))
        result = problem.compare_oracle(problem.solve())
        assert result["max_abs_diff"] < 1e-6

    def test_game_solution(self, write_config):
        spec = copy.deepcopy(load_problem_spec("symmetric_game"))
        spec["grid"]["t_steps"] = 20
        problem = load_problem(write_config(spec))
        solution = problem.solve()
        assert isinstance(solution, GameSolution)
        assert problem.value_field(solution).sup_norm() < 1e-8
        assert problem.diagnostics(solution)["game"]["iterations"] == 1

    def test_annuity_matches_closed_form(self):
        problem = load_problem(PROBLEMS_DIR / "annuity.json")
        solution = problem.solve()
        grid, alpha = problem.grid, problem.alpha
        inner = np.abs(grid.points[:, 0]) <= 0.5
        remaining = grid.t_nodes[-1] - grid.t_nodes[:-1]
        expected = -np.expm1(-alpha * remaining)[:, None] / alpha * np.ones(int(inner.sum()))
        np.testing.assert_allclose(solution.value.values[:-1][:, inner], expected, rtol=1e-6)
        assert not np.any(solution.contact_mask[:-1][:, inner])

    def test_start_point_outside_box(self, small_put_spec, write_config):
        small_put_spec["mc"]["start_points"] = [{"t": 0.0, "x": [5.0]}]
        problem = load_problem(write_config(small_put_spec))
        with pytest.raises(StartOutsideBox):
            problem.verify(problem.solve())


@pytest.mark.slow
@pytest.mark.integration
class TestVerify:
    """Monte Carlo verification of solved problems."""

    def test_put_passes_and_control_is_flagged(self, small_put_spec, write_config):
        problem = load_problem(write_config(small_put_spec))
        report = problem.verify(problem.solve(), negative_control=True)
        assert report.control_flagged
        assert report.passed, report.failures()

    def test_holding_cost(self, write_config):
        spec = copy.deepcopy(load_problem_spec("holding_cost"))
        spec["mc"].update(n_paths=2000, block_size=500, vi_trials=4)
        problem = load_problem(write_config(spec))
        solution = problem.solve()
        expected = (1.0 - np.exp(-0.06)) / 0.06
        assert solution.value.at(0.0, [0.0]) == pytest.approx(expected, rel=1e-6)
        report = problem.verify(solution, negative_control=True)
        assert report.passed, report.failures()
        assert any(check.name == "resolvent identity" for check in report.checks)

    def test_symmetric_game(self, write_config):
        spec = copy.deepcopy(load_problem_spec("symmetric_game"))
        spec["grid"]["t_steps"] = 20
        spec["mc"].update(n_paths=2000, block_size=500)
        problem = load_problem(write_config(spec))
        report = problem.verify(problem.solve())
        assert report.passed, report.failures()

    def test_seed_reproducibility(self, small_put_spec, write_config):
        problem = load_problem(write_config(small_put_spec))
        solution = problem.solve()
        first = problem.verify(solution).to_dict()
        second = problem.verify(solution).to_dict()
        assert first == second
