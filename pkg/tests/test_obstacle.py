"""
Tests for the penalized one-obstacle solver, its holding-cost reduction and
the solution diagnostics.
"""

import numpy as np
import pytest

from dynkin_vi.constants import ConfigError, PenaltyDivergence
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.obstacle import (
    PenaltyConfig,
    free_boundary,
    killed_data,
    minimality_gap,
    solve_obstacle,
    solve_obstacle_with_cost,
    solve_penalized,
    solve_penalized_with_source,
    vi_residual_check,
)

from tests.conftest import RATE, STRIKE, VOLATILITY, brownian, gbm, put_field


def binomial_american_put(spot, strike, rate, volatility, maturity, steps):
    """Cox-Ross-Rubinstein tree with early exercise at every node."""
    dt = maturity / steps
    up = np.exp(volatility * np.sqrt(dt))
    down = 1.0 / up
    p = (np.exp(rate * dt) - down) / (up - down)
    discount = np.exp(-rate * dt)
    j = np.arange(steps + 1)
    values = np.maximum(strike - spot * up**j * down ** (steps - j), 0.0)
    for i in range(steps - 1, -1, -1):
        prices = spot * up ** j[: i + 1] * down ** (i - j[: i + 1])
        values = np.maximum(discount * (p * values[1 : i + 2] + (1 - p) * values[: i + 1]), strike - prices)
    return float(values[0])


@pytest.fixture(scope="module")
def put_solution():
    grid = SpaceTimeGrid.uniform(1.0, 50, [(0.2, 3.0, 141)])
    model = gbm()
    g = put_field(grid)
    return model, grid, g, solve_obstacle(model, grid, g, RATE, PenaltyConfig())


class TestPenaltyConfig:
    """Validation of the penalty settings."""

    def test_defaults_come_from_config(self):
        cfg = PenaltyConfig()
        assert cfg.eps_schedule[0] > cfg.eps_schedule[-1]
        assert cfg.eps_schedule[-1] <= 1e-8
        assert cfg.max_inner_iters >= 1

    @pytest.mark.parametrize("schedule", [(), (1e-2, 1e-2), (1e-2, -1e-3), (1e-4, 1e-2)])
    def test_bad_schedules_rejected(self, schedule):
        with pytest.raises(ConfigError) as info:
            PenaltyConfig(eps_schedule=schedule)
        assert info.value.key == "penalty.eps_schedule"

    def test_unknown_setting_rejected(self):
        with pytest.raises(ConfigError) as info:
            PenaltyConfig.from_dict({"eps": 0.1})
        assert info.value.key == "penalty.eps"

    def test_dict_round_trip(self):
        cfg = PenaltyConfig(eps_schedule=(1e-1, 1e-3), inner_tol=1e-9)
        assert PenaltyConfig.from_dict(cfg.to_dict()) == cfg


class TestPenalizedEquation:
    """One epsilon at a time."""

    def test_killed_data(self):
        np.testing.assert_array_equal(killed_data(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_solutions_increase_as_eps_decreases(self, put_grid):
        model, g = gbm(), put_field(put_grid)
        coarse = solve_penalized(model, put_grid, g, RATE, 1e-2)
        fine = solve_penalized(model, put_grid, g, RATE, 1e-4)
        assert np.all(fine.values >= coarse.values - 1e-10)

    def test_shortfall_shrinks_with_eps(self, put_grid):
        model, g = gbm(), put_field(put_grid)
        gaps = [float(np.max(g.values - solve_penalized(model, put_grid, g, RATE, eps).values)) for eps in (1e-2, 1e-4, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-6

    def test_data_is_imposed(self, put_grid):
        model, g = gbm(), put_field(put_grid)
        u = solve_penalized(model, put_grid, g, RATE, 1e-3)
        np.testing.assert_allclose(u.values[-1], g.values[-1])
        np.testing.assert_allclose(u.values[:, put_grid.boundary], g.values[:, put_grid.boundary])

    def test_non_positive_eps_rejected(self, put_grid):
        with pytest.raises(ValueError, match="eps"):
            solve_penalized(gbm(), put_grid, put_field(put_grid), RATE, 0.0)

    def test_divergence_reports_slice(self, put_grid):
        cfg = PenaltyConfig(eps_schedule=(1e-6,), max_inner_iters=1, inner_tol=1e-300)
        with pytest.raises(PenaltyDivergence) as info:
            solve_penalized(gbm(), put_grid, put_field(put_grid), RATE, 1e-6, cfg=cfg)
        assert info.value.slice_index == put_grid.n_time - 2


class TestObstacleSolution:
    """Properties of the value e_g."""

    def test_dominates_obstacle(self, put_solution):
        _, _, g, solution = put_solution
        assert np.min(solution.value.values - g.values) >= -1e-9

    def test_continuation_is_monotone_and_cauchy(self, put_solution):
        _, _, _, solution = put_solution
        assert len(solution.levels) == len(PenaltyConfig().eps_schedule)
        assert solution.levels[-1].delta < 1e-7
        assert solution.diagnostics()["dominance_gap"] >= -1e-9

    def test_levels_are_recorded(self, put_solution):
        _, _, _, solution = put_solution
        assert solution.levels[0].delta is None
        assert all(level.delta is not None for level in solution.levels[1:])
        assert solution.penalty_residual.shape == (len(solution.levels),)

    def test_contact_at_deep_in_the_money(self, put_solution):
        _, grid, _, solution = put_solution
        assert solution.contact_mask[0, 1]
        assert not solution.contact_mask[0, grid.n_space // 2]

    def test_free_boundary_below_strike(self, put_solution):
        _, _, _, solution = put_solution
        boundary = free_boundary(solution)[:-1]
        assert np.all(np.isfinite(boundary))
        assert np.all(boundary < STRIKE)
        assert boundary[-1] >= boundary[0]

    def test_free_boundary_only_in_one_dimension(self, plane_grid):
        model = brownian(dim=2)
        g = ScalarField.from_function(plane_grid, lambda t, x: np.maximum(1.0 - x.mean(axis=1), 0.0))
        solution = solve_obstacle(model, plane_grid, g, 0.1, PenaltyConfig(eps_schedule=(1e-2, 1e-4)))
        with pytest.raises(ValueError, match="one dimension"):
            free_boundary(solution)

    def test_minimal_among_excessive_majorants(self, put_solution):
        _, grid, _, solution = put_solution
        candidates = [ScalarField.constant(grid, STRIKE), solution.value + 0.1]
        assert minimality_gap(solution, candidates) <= 1e-9

    def test_variational_inequality(self, put_solution):
        model, grid, g, solution = put_solution
        assert vi_residual_check(solution, model, grid, g, RATE, trial_count=20) >= -1e-6

    def test_diagnostics(self, put_solution):
        _, _, _, solution = put_solution
        report = solution.diagnostics()
        assert report["dominance_gap"] > -1e-6
        assert 0.0 < report["contact_fraction"] < 1.0
        assert len(report["free_boundary"]) == solution.value.grid.n_time

    def test_non_positive_obstacle_gives_zero_value(self, line_grid):
        g = ScalarField.from_function(line_grid, lambda t, x: -np.abs(x[:, 0]) - t)
        solution = solve_obstacle(brownian(), line_grid, g, 0.1, PenaltyConfig(eps_schedule=(1e-2, 1e-6)))
        np.testing.assert_allclose(solution.value.values, 0.0, atol=1e-12)

    def test_constant_obstacle_is_everywhere_in_contact(self, line_grid):
        g = ScalarField.constant(line_grid, 0.7)
        solution = solve_obstacle(brownian(), line_grid, g, 0.1, PenaltyConfig(eps_schedule=(1e-2, 1e-6, 1e-8)))
        assert solution.contact_mask.all()
        np.testing.assert_allclose(solution.value.values, 0.7, atol=solution.contact_tol)

    @pytest.mark.slow
    def test_american_put_matches_binomial_tree(self):
        grid = SpaceTimeGrid.uniform(1.0, 200, [(0.2, 3.0, 281)])
        model = gbm()
        cfg = PenaltyConfig(eps_schedule=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8))
        solution = solve_obstacle(model, grid, put_field(grid), RATE, cfg)
        reference = binomial_american_put(1.0, STRIKE, RATE, VOLATILITY, 1.0, 10_000)
        assert solution.value.at(0.0, [1.0]) == pytest.approx(reference, abs=5e-3)


class TestHoldingCost:
    """The resolvent reduction and the source-term formulation."""

    def test_constant_cost_without_stopping(self):
        grid = SpaceTimeGrid.uniform(1.0, 200, [(-1.0, 1.0, 41)])
        model = brownian(sigma=0.01, alpha=0.06)
        g = ScalarField.zeros(grid)
        f = ScalarField.constant(grid, 1.0)
        solution = solve_obstacle_with_cost(model, grid, g, f, 0.06, PenaltyConfig(eps_schedule=(1e-4, 1e-8)))
        inner = np.abs(grid.points[:, 0]) <= 0.5
        remaining = 1.0 - grid.t_nodes[:-1]
        expected = np.repeat((-np.expm1(-0.06 * remaining) / 0.06)[:, None], int(inner.sum()), axis=1)
        np.testing.assert_allclose(solution.value.values[:-1][:, inner], expected, rtol=1e-6)
        assert not solution.contact_mask[0, grid.n_space // 2]

    def test_reduction_matches_source_formulation(self, put_grid, fine_penalty):
        model = gbm()
        g = put_field(put_grid)
        f = ScalarField.from_function(put_grid, lambda t, x: 0.05 * np.sin(3.0 * x[:, 0]) - 0.02)
        reduced = solve_obstacle_with_cost(model, put_grid, g, f, RATE, fine_penalty)
        direct = solve_obstacle(model, put_grid, g, RATE, fine_penalty, source=f)
        assert reduced.value.max_abs_diff(direct.value) < 1e-8

    def test_single_level_with_source(self, put_grid):
        model = gbm()
        g = put_field(put_grid)
        f = ScalarField.constant(put_grid, 0.01)
        u = solve_penalized_with_source(model, put_grid, g, f, RATE, 1e-4)
        without = solve_penalized(model, put_grid, g, RATE, 1e-4)
        assert np.all(u.values >= without.values - 1e-12)

    def test_variational_inequality_with_cost(self, put_grid, fine_penalty):
        model = gbm()
        g = put_field(put_grid)
        f = ScalarField.constant(put_grid, -0.02)
        solution = solve_obstacle_with_cost(model, put_grid, g, f, RATE, fine_penalty)
        assert solution.resolvent is not None
        assert vi_residual_check(solution, model, put_grid, g, RATE, trial_count=10, f=f) >= -1e-6
