"""
Tests for the finite-volume Dirichlet forms, the space-time forms and the
resolvent solve.
"""

import gc
import weakref

import numpy as np
import pytest

from dynkin_vi.constants import AssemblyError
from dynkin_vi.forms import (
    assemble_slice,
    bilinear_alpha,
    cached_models,
    coupled_form,
    fitted_step,
    operators_for,
    resolvent_apply,
    spacetime_form,
    spacetime_inner,
    time_difference_energy,
)
from dynkin_vi.grid import ScalarField, SpaceTimeGrid
from dynkin_vi.model import DensityMode, Diffusion, DiffusionModel, Drift, build_density

from tests.conftest import RATE, brownian, gbm


def random_field(grid, seed):
    return ScalarField(grid, np.random.default_rng(seed).standard_normal((grid.n_time, grid.n_space)))


class TestSliceAssembly:
    """Stiffness and mass of one time slice."""

    def test_constants_have_zero_energy(self, line_grid):
        op = operators_for(brownian(), line_grid)[0]
        np.testing.assert_allclose(op.stiffness @ np.ones(line_grid.n_space), 0.0, atol=1e-12)

    def test_energy_of_linear_function(self, line_grid):
        # E(x, x) = int A dx = 0.5 * 2
        op = operators_for(brownian(mode=DensityMode.UNIT), line_grid)[0]
        x = line_grid.points[:, 0]
        assert op.energy(x, x) == pytest.approx(1.0)

    def test_hat_function_energy(self):
        # A = 1, slopes +-2 over two cells of width 0.5
        grid = SpaceTimeGrid.uniform(1.0, 1, [(-1.0, 1.0, 5)])
        op = operators_for(brownian(sigma=np.sqrt(2.0), mode=DensityMode.UNIT), grid)[0]
        hat = np.eye(grid.n_space)[2]
        assert op.energy(hat, hat) == pytest.approx(4.0, rel=1e-12)

    def test_hat_function_energy_with_exponential_density(self):
        # rho = exp(x): E(hat, hat) = (e^{h} - e^{-h}) / h^2 around x = 0
        grid = SpaceTimeGrid.uniform(1.0, 1, [(-1.0, 1.0, 5)])
        op = operators_for(brownian(sigma=np.sqrt(2.0), drift=1.0), grid)[0]
        hat = np.eye(grid.n_space)[2]
        assert op.energy(hat, hat) == pytest.approx(2.0 * np.sinh(0.5) / 0.25, rel=1e-9)

    @pytest.mark.parametrize("dim", [1, 2])
    def test_coercive(self, dim, line_grid, plane_grid):
        grid = line_grid if dim == 1 else plane_grid
        op = operators_for(brownian(dim=dim, drift=0.3), grid)[0]
        rng = np.random.default_rng(dim)
        for _ in range(20):
            u = rng.standard_normal(grid.n_space)
            assert op.energy(u, u) >= -1e-12
            assert bilinear_alpha(op, u, u, 0.1) >= 0.1 * float(u @ (op.mass * u)) - 1e-12

    def test_operators_are_released_with_their_grid(self):
        grid = SpaceTimeGrid.uniform(1.0, 4, [(-1.0, 1.0, 9)])
        model = brownian()
        first = operators_for(model, grid)
        assert operators_for(model, grid) is first
        assert cached_models(grid) == 1
        ref = weakref.ref(grid)
        del grid, first
        gc.collect()
        assert ref() is None

    def test_unit_mass_is_cell_volume(self, plane_grid):
        op = operators_for(brownian(dim=2, mode=DensityMode.UNIT), plane_grid)[0]
        np.testing.assert_allclose(op.mass, plane_grid.cell_volumes)

    def test_weighted_form_is_symmetric(self, put_grid):
        op = operators_for(gbm(), put_grid)[5]
        assert op.symmetric
        assert abs(op.stiffness - op.stiffness.T).max() < 1e-12

    def test_unit_mode_with_drift_is_upwinded(self, line_grid):
        op = operators_for(brownian(drift=0.5, mode=DensityMode.UNIT), line_grid)[0]
        assert not op.symmetric
        # M-matrix: non-positive off-diagonal entries
        off = op.stiffness - np.diag(op.stiffness.diagonal())
        assert np.max(off) <= 0.0

    def test_mixed_diffusion_rejected_in_two_dimensions(self, plane_grid):
        model = DiffusionModel(
            2,
            Drift("constant", (0.0, 0.0), (0.0, 0.0)),
            Diffusion("constant", matrix=((1.0, 0.5), (0.0, 1.0))),
            0.1,
        )
        with pytest.raises(AssemblyError, match="mixed"):
            assemble_slice(model, build_density(model), plane_grid, 0)

    def test_weighted_form_matches_generator(self):
        # For u = x^2 and constant coefficients, -(L u) = -(2 A + 2 b x) = -(1 + 0.6 x).
        grid = SpaceTimeGrid.uniform(1.0, 1, [(-1.0, 1.0, 201)])
        op = operators_for(brownian(drift=0.3), grid)[0]
        x = grid.points[:, 0]
        minus_lu = (op.stiffness @ x**2) / op.mass
        interior = grid.interior
        np.testing.assert_allclose(minus_lu[interior], -(1.0 + 0.6 * x[interior]), atol=1e-3)

    def test_slices_follow_time_dependent_coefficients(self):
        grid = SpaceTimeGrid.uniform(1.0, 2, [(0.0, 1.0, 11)])
        model = DiffusionModel(
            1, Drift("constant", (0.0,), (0.0,)), Diffusion("constant", matrix=((1.0,),), time_rate=1.0), 0.1
        )
        first, last = operators_for(model, grid)[0], operators_for(model, grid)[-1]
        # a doubles by t = 1, so A and the stiffness grow fourfold
        np.testing.assert_allclose(last.stiffness.toarray(), 4.0 * first.stiffness.toarray())


class TestSpaceTimeForms:
    """Coupled and space-time forms over the whole window."""

    def test_bilinear_alpha_adds_weighted_mass(self, line_grid):
        op = operators_for(brownian(), line_grid)[0]
        u = np.ones(line_grid.n_space)
        assert bilinear_alpha(op, u, u, 0.5) == pytest.approx(0.5 * op.mass.sum())

    def test_bilinear_alpha_shape_check(self, line_grid):
        op = operators_for(brownian(), line_grid)[0]
        with pytest.raises(ValueError, match="shape"):
            bilinear_alpha(op, np.ones(3), np.ones(line_grid.n_space), 0.1)

    def test_coupled_form_is_symmetric_for_weighted_forms(self, line_grid):
        ops = operators_for(brownian(drift=0.3), line_grid)
        u, v = random_field(line_grid, 1), random_field(line_grid, 2)
        assert coupled_form(ops, u, v, 0.1) == pytest.approx(coupled_form(ops, v, u, 0.1))

    def test_bilinear_alpha_is_symmetric_for_weighted_forms(self, put_grid):
        op = operators_for(gbm(), put_grid)[7]
        rng = np.random.default_rng(10)
        for _ in range(5):
            u, v = rng.standard_normal((2, put_grid.n_space))
            assert bilinear_alpha(op, u, v, RATE) == pytest.approx(bilinear_alpha(op, v, u, RATE), rel=1e-10)

    def test_time_derivative_sides_differ_by_end_terms(self, line_grid):
        ops = operators_for(brownian(drift=0.3), line_grid)
        u, v = random_field(line_grid, 3), random_field(line_grid, 4)
        left = spacetime_form(ops, u, v, 0.1, "left")
        right = spacetime_form(ops, u, v, 0.1, "right")
        mass = ops[0].mass
        weight = line_grid.dt[0] / fitted_step(line_grid.dt[0], 0.1)
        ends = u.values[-1] @ (mass * v.values[-1]) - u.values[0] @ (mass * v.values[0])
        assert left - right == pytest.approx(-weight * ends)

    def test_summation_by_parts(self, line_grid):
        # -sum (u_{k+1} - u_k) M u_k = (sum |u_{k+1} - u_k|_M^2 - |u_K|_M^2 + |u_0|_M^2) / 2
        ops = operators_for(brownian(drift=0.3), line_grid)
        u = random_field(line_grid, 11)
        mass = ops[0].mass
        du = np.diff(u.values, axis=0)
        weight = line_grid.dt[0] / fitted_step(line_grid.dt[0], 0.1)
        jumps = float(np.sum(du * (mass * du)))
        ends = u.values[-1] @ (mass * u.values[-1]) - u.values[0] @ (mass * u.values[0])
        gap = spacetime_form(ops, u, u, 0.1) - coupled_form(ops, u, u, 0.1)
        assert gap == pytest.approx(0.5 * weight * (jumps - ends))

    def test_linear_in_time_pairs_with_the_inner_product(self, line_grid):
        ops = operators_for(brownian(drift=0.3), line_grid)
        u = ScalarField.from_function(line_grid, lambda t, x: 2.5 * t * np.ones(x.shape[0]))
        v = random_field(line_grid, 12)
        ones = ScalarField.constant(line_grid, 1.0)
        expected = -2.5 * spacetime_inner(ops, ones, v)
        assert spacetime_form(ops, u, v, 0.0) == pytest.approx(expected, rel=1e-10)

    def test_unknown_side_rejected(self, line_grid):
        ops = operators_for(brownian(), line_grid)
        u = random_field(line_grid, 5)
        with pytest.raises(ValueError, match="time_derivative_side"):
            spacetime_form(ops, u, u, 0.1, "middle")

    def test_operator_count_checked(self, line_grid):
        ops = operators_for(brownian(), line_grid)
        u = random_field(line_grid, 6)
        with pytest.raises(ValueError, match="slice operators"):
            spacetime_inner(ops[:-1], u, u)

    def test_time_difference_energy_vanishes_for_static_fields(self, line_grid):
        ops = operators_for(brownian(), line_grid)
        static = ScalarField.from_function(line_grid, lambda t, x: np.sin(x[:, 0]))
        assert time_difference_energy(ops, static) == pytest.approx(0.0)
        assert time_difference_energy(ops, random_field(line_grid, 7)) > 0.0


class TestResolvent:
    """R f solved backwards from zero terminal and boundary data."""

    def test_constant_cost_matches_continuous_annuity(self):
        grid = SpaceTimeGrid.uniform(1.0, 200, [(-1.0, 1.0, 41)])
        model = brownian(sigma=0.01, alpha=0.06)
        r = resolvent_apply(model, grid, ScalarField.constant(grid, 1.0), 0.06)
        expected = -np.expm1(-0.06 * (1.0 - grid.t_nodes)) / 0.06
        inner = np.abs(grid.points[:, 0]) <= 0.5
        np.testing.assert_allclose(r.values[:, inner], np.repeat(expected[:, None], int(inner.sum()), axis=1), rtol=1e-9, atol=1e-14)

    def test_fitted_step(self):
        assert fitted_step(0.1, 0.0) == 0.1
        assert 1.0 + 0.5 * fitted_step(0.1, 0.5) == pytest.approx(np.exp(0.05), rel=1e-14)

    def test_contraction(self, line_grid):
        f = random_field(line_grid, 9)
        r = resolvent_apply(brownian(drift=0.3), line_grid, f, 0.1)
        assert 0.1 * r.sup_norm() <= f.sup_norm() + 1e-12

    def test_zero_data(self, line_grid):
        r = resolvent_apply(brownian(), line_grid, ScalarField.constant(line_grid, 1.0), 0.1)
        np.testing.assert_array_equal(r.values[-1], 0.0)
        np.testing.assert_array_equal(r.values[:, line_grid.boundary], 0.0)
        assert np.all(r.values >= 0.0)

    def test_linear_in_cost(self, line_grid):
        model = brownian()
        f = random_field(line_grid, 8)
        once = resolvent_apply(model, line_grid, f, 0.1)
        twice = resolvent_apply(model, line_grid, f * 2.0, 0.1)
        np.testing.assert_allclose(twice.values, 2.0 * once.values, atol=1e-12)
