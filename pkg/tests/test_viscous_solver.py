import logging

import numpy as np
import pytest

from shockadjoint.core.errors import (
    NoInteriorLayerError,
    ShockAdjointError,
    SingularSystemError,
    SolverDivergenceError,
    TransitionRegionError,
)
from shockadjoint.models.reference_solutions import reference_solution_for
from shockadjoint.solvers.viscous_solver import (
    FieldSolution,
    Grid,
    GridPolicy,
    NewtonSettings,
    block_matvec,
    conservation_diagnostic,
    continuation_sweep,
    detect_transition_region,
    locate_layer_peak,
    rescaled_warm_start,
    smooth_jump,
    smooth_jump_forms,
    solve_block_tridiagonal,
    solve_viscous_primal,
)

from tests.conftest import SCALAR_TARGET_JUMP


def _random_blocks(rng, n_nodes, d):
    lower = rng.normal(size=(n_nodes, d, d))
    diag = rng.normal(size=(n_nodes, d, d)) + 10.0 * np.eye(d)
    upper = rng.normal(size=(n_nodes, d, d))
    return lower, diag, upper


def _dense(lower, diag, upper):
    n_nodes, d, _ = diag.shape
    a = np.zeros((n_nodes * d, n_nodes * d))
    for i in range(n_nodes):
        rows = slice(i * d, (i + 1) * d)
        a[rows, i * d:(i + 1) * d] = diag[i]
        if i > 0:
            a[rows, (i - 1) * d:i * d] = lower[i]
        if i < n_nodes - 1:
            a[rows, (i + 1) * d:(i + 2) * d] = upper[i]
    return a


# --- grids --------------------------------------------------------------------

def test_uniform_grid():
    grid = Grid.uniform(20)
    assert grid.cells == 20
    assert grid.h == pytest.approx(0.05)
    assert grid.same_as(Grid.uniform(20))
    assert not grid.same_as(Grid.uniform(40))


@pytest.mark.parametrize("nodes", [
    np.linspace(0.0, 1.0, 9),
    np.linspace(0.0, 1.0, 33) ** 2,
    np.linspace(1.0, 0.0, 33),
])
def test_bad_grids(nodes):
    with pytest.raises(ShockAdjointError):
        Grid(nodes)


@pytest.mark.parametrize(("epsilon", "cells"), [(0.05, 160), (0.01, 800), (1.0, 16)])
def test_grid_policy(epsilon, cells):
    assert GridPolicy(kappa=8.0).grid_for(epsilon).cells == cells


def test_grid_policy_caps_node_count(caplog):
    with caplog.at_level(logging.WARNING):
        grid = GridPolicy(kappa=8.0, max_nodes=1000).grid_for(1e-4)
    assert grid.cells == 999
    assert "capped" in caplog.text


# --- banded systems -----------------------------------------------------------

@pytest.mark.parametrize("d", [1, 3])
def test_block_tridiagonal_matches_dense_solve(rng, d):
    lower, diag, upper = _random_blocks(rng, 7, d)
    rhs = rng.normal(size=(7, d))
    z = solve_block_tridiagonal(lower, diag, upper, rhs)
    expected = np.linalg.solve(_dense(lower, diag, upper), rhs.reshape(-1)).reshape(7, d)
    np.testing.assert_allclose(z, expected, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(block_matvec(lower, diag, upper, z), rhs, atol=1e-10)


def test_singular_system_reports_pivot_ratio():
    zeros = np.zeros((5, 1, 1))
    with pytest.raises(SingularSystemError) as info:
        solve_block_tridiagonal(zeros, zeros, zeros, np.ones((5, 1)))
    assert info.value.exit_code == 3
    assert info.value.pivot_ratio == 0.0


# --- primal solve -------------------------------------------------------------

def test_scalar_solve_converges(scalar_viscous):
    sol = scalar_viscous
    assert sol.converged
    assert sol.final_residual_norm < 1e-10
    assert sol.values[0, 0] == pytest.approx(1.2)
    assert sol.values[-1, 0] == pytest.approx(-1.4)
    assert len(sol.uid) == 16


def test_scalar_solve_matches_exact_solution_away_from_layer(scalar_viscous, manufactured):
    x = scalar_viscous.grid.nodes
    away = (x < 0.3) | (x > 0.5)
    gap = np.abs(scalar_viscous.values[away] - manufactured.evaluate(x[away]))
    assert np.max(gap) < 0.05


def test_converged_solution_is_a_fixed_point(scalar, scalar_viscous):
    again = solve_viscous_primal(scalar, scalar_viscous.grid, scalar_viscous.epsilon, init=scalar_viscous)
    assert again.converged
    assert again.newton_iterations <= 1
    np.testing.assert_allclose(again.values, scalar_viscous.values, atol=1e-9)


def test_init_on_other_grid_rejected(scalar, scalar_viscous):
    with pytest.raises(ShockAdjointError):
        solve_viscous_primal(scalar, Grid.uniform(400), scalar_viscous.epsilon, init=scalar_viscous)


def test_nonpositive_viscosity_rejected(scalar):
    with pytest.raises(ShockAdjointError):
        solve_viscous_primal(scalar, Grid.uniform(100), 0.0)


def test_under_resolved_solve_warns(scalar, caplog):
    with caplog.at_level(logging.WARNING):
        sol = solve_viscous_primal(scalar, GridPolicy(kappa=3.0).grid_for(0.05), 0.05)
    assert sol.converged
    assert "layer under-resolved" in caplog.text


def test_newton_budget_exhaustion_is_flagged(scalar):
    sol = solve_viscous_primal(scalar, Grid.uniform(800), 0.01, settings=NewtonSettings(max_iterations=1))
    assert not sol.converged
    assert sol.newton_iterations == 1


def test_conservation_diagnostic_is_flat(scalar, scalar_viscous):
    diagnostic = conservation_diagnostic(scalar, scalar_viscous)
    assert diagnostic.shape == (scalar_viscous.grid.cells, 1)
    assert np.ptp(diagnostic) < 1e-9


# --- continuation -------------------------------------------------------------

def test_single_step_continuation_equals_direct_solve(scalar):
    policy = GridPolicy(kappa=8.0)
    swept = continuation_sweep(scalar, policy, [0.05])
    direct = solve_viscous_primal(scalar, policy.grid_for(0.05), 0.05)
    assert len(swept) == 1
    np.testing.assert_array_equal(swept[0].values, direct.values)
    assert swept[0].uid == direct.uid


def test_continuation_sweep(scalar):
    seen = []
    solutions = continuation_sweep(scalar, GridPolicy(kappa=8.0), [0.04, 0.02, 0.01], on_solution=seen.append)
    assert [s.epsilon for s in solutions] == [0.04, 0.02, 0.01]
    assert all(s.converged for s in solutions)
    assert [s.grid.cells for s in solutions] == [200, 400, 800]
    assert seen == solutions


@pytest.mark.parametrize("eps_list", [[], [0.01, 0.02], [0.02, 0.02], [0.02, -0.01]])
def test_continuation_rejects_bad_lists(scalar, eps_list):
    with pytest.raises(ShockAdjointError):
        continuation_sweep(scalar, GridPolicy(), eps_list)


def test_continuation_raises_when_first_solve_diverges(scalar):
    with pytest.raises(SolverDivergenceError):
        continuation_sweep(scalar, GridPolicy(), [0.01, 0.005], NewtonSettings(max_iterations=1))


def test_rescaled_warm_start_saves_newton_iterations(scalar):
    policy = GridPolicy(kappa=8.0)
    coarse = solve_viscous_primal(scalar, policy.grid_for(0.02), 0.02)
    grid = policy.grid_for(0.01)
    cold = solve_viscous_primal(scalar, grid, 0.01)
    guess = rescaled_warm_start(coarse, grid, 0.01, reference_solution_for(scalar))
    warm = solve_viscous_primal(scalar, grid, 0.01, init=FieldSolution(grid, guess, 0.01, False, 0, np.inf))
    assert cold.converged and warm.converged
    assert warm.newton_iterations < cold.newton_iterations
    np.testing.assert_allclose(warm.values, cold.values, atol=1e-7)


def test_continuation_uses_the_rescaled_warm_start(scalar):
    policy = GridPolicy(kappa=8.0)
    swept = continuation_sweep(scalar, policy, [0.02, 0.01])
    cold = solve_viscous_primal(scalar, policy.grid_for(0.01), 0.01)
    assert swept[1].newton_iterations < cold.newton_iterations


def test_warm_start_is_the_interpolant_away_from_the_layer(scalar):
    policy = GridPolicy(kappa=8.0)
    coarse = solve_viscous_primal(scalar, policy.grid_for(0.02), 0.02)
    grid = policy.grid_for(0.01)
    guess = rescaled_warm_start(coarse, grid, 0.01, reference_solution_for(scalar))
    far = np.abs(grid.nodes - 0.4) > 0.2
    np.testing.assert_allclose(guess[far], coarse.interpolate(grid.nodes)[far], atol=1e-12)
    assert guess[0, 0] == pytest.approx(1.2)
    assert guess[-1, 0] == pytest.approx(-1.4)


# --- transition region --------------------------------------------------------

def test_transition_region_brackets_the_shock(scalar_viscous):
    region = detect_transition_region(scalar_viscous, 0.05)
    assert region.alpha_minus < region.alpha_hat < region.alpha_plus
    assert abs(region.alpha_hat - 0.4) < 5 * scalar_viscous.epsilon
    g = np.abs(np.gradient(scalar_viscous.values[:, 0], scalar_viscous.grid.h))
    assert region.max_gradient == pytest.approx(g.max())
    assert g[region.index_minus] < 0.05 * region.max_gradient
    assert g[region.index_plus] < 0.05 * region.max_gradient
    assert scalar_viscous.grid.nodes[region.index_hat] == region.alpha_hat


def test_transition_region_narrows_with_theta(scalar_viscous):
    widths = [detect_transition_region(scalar_viscous, theta).width for theta in (0.01, 0.05, 0.5, 0.999)]
    assert widths == sorted(widths, reverse=True)
    assert widths[-1] <= 6 * scalar_viscous.grid.h


@pytest.mark.parametrize("theta", [0.0, 1.0, -0.1])
def test_transition_region_rejects_bad_theta(scalar_viscous, theta):
    with pytest.raises(ShockAdjointError):
        detect_transition_region(scalar_viscous, theta)


def test_no_interior_layer():
    grid = Grid.uniform(32)
    sol = FieldSolution(grid, (grid.nodes ** 2)[:, None], 0.01, True, 0, 0.0)
    with pytest.raises(NoInteriorLayerError):
        detect_transition_region(sol, 0.05)


def test_transition_region_needs_converged_solution(scalar_viscous):
    stale = FieldSolution(scalar_viscous.grid, scalar_viscous.values, 0.01, False, 50, 1.0)
    with pytest.raises(SolverDivergenceError):
        detect_transition_region(stale, 0.05)


def _layer_with_boundary_layer(cells=2000):
    """Scalar-like shock at 0.4 plus a steeper boundary layer at x = 1."""
    grid = Grid.uniform(cells)
    x = grid.nodes
    w = 0.4 - x - 0.8 * np.tanh((x - 0.4) / 0.02) + 0.5 * np.exp(-(1.0 - x) / 0.002)
    return FieldSolution(grid, w[:, None], 0.008, True, 0, 0.0)


def test_layer_search_skips_boundary_layers():
    sol = _layer_with_boundary_layer()
    with pytest.raises(NoInteriorLayerError):
        locate_layer_peak(sol)
    assert sol.grid.nodes[locate_layer_peak(sol, near=0.4)] == pytest.approx(0.4)

    region = detect_transition_region(sol, 0.05, near=0.4)
    assert 0.2 < region.alpha_minus < 0.4 < region.alpha_plus < 0.6
    assert region.alpha_hat == pytest.approx(0.4)


def test_layer_peak_on_the_search_window_edge_is_rejected():
    sol = _layer_with_boundary_layer()
    # Window [0.625, 0.875]: |w_x| only decays away from the shock there.
    with pytest.raises(NoInteriorLayerError):
        locate_layer_peak(sol, near=0.75)


def test_region_that_reaches_the_boundary_is_an_error(scalar):
    # At eps = 0.05 the layer tail still exceeds 1% of the background slope at x = 0.
    sol = solve_viscous_primal(scalar, GridPolicy(kappa=8.0).grid_for(0.05), 0.05)
    assert sol.converged
    with pytest.raises(TransitionRegionError):
        detect_transition_region(sol, 0.01, near=0.4)


def test_region_endpoints_sit_on_the_background_slope(scalar_viscous):
    region = detect_transition_region(scalar_viscous, 0.05, near=0.4)
    g = np.abs(np.gradient(scalar_viscous.values[:, 0], scalar_viscous.grid.h))
    # Outer slope of the benchmark is exactly -1.
    assert g[region.index_minus] == pytest.approx(1.0, abs=0.1)
    assert g[region.index_plus] == pytest.approx(1.0, abs=0.1)
    assert region.width < 30 * scalar_viscous.epsilon


# --- smooth jumps -------------------------------------------------------------

def test_smooth_jump_of_constant_vanishes(scalar_viscous):
    region = detect_transition_region(scalar_viscous, 0.05)
    q = np.full(len(scalar_viscous.grid.nodes), 3.0)
    assert smooth_jump(scalar_viscous, q, region) == 0.0


def test_smooth_jump_approaches_inviscid_jumps(scalar, scalar_viscous_fine):
    region = detect_transition_region(scalar_viscous_fine, 0.05)
    w = scalar_viscous_fine.values
    assert smooth_jump(scalar_viscous_fine, w[:, 0], region) == pytest.approx(-1.6, abs=0.05)
    assert smooth_jump(scalar_viscous_fine, scalar.target_integrand(w), region) == pytest.approx(SCALAR_TARGET_JUMP, abs=0.05)
    vector = smooth_jump(scalar_viscous_fine, w, region)
    assert vector.shape == (1,)


def test_smooth_jump_requires_grid_samples(scalar_viscous):
    region = detect_transition_region(scalar_viscous, 0.05)
    with pytest.raises(ShockAdjointError):
        smooth_jump(scalar_viscous, np.zeros(10), region)


def test_smooth_jump_forms_differ_by_second_differences(scalar_viscous):
    region = detect_transition_region(scalar_viscous, 0.05)
    x = scalar_viscous.grid.nodes
    h = scalar_viscous.grid.h
    endpoint, quadrature = smooth_jump_forms(scalar_viscous, x ** 3, region)
    assert endpoint == pytest.approx(region.alpha_plus ** 3 - region.alpha_minus ** 3, rel=1e-12)
    # Second differences of x^3 are 6 h^2 x.
    assert quadrature - endpoint == pytest.approx(1.5 * h * h * region.width, rel=1e-4)

    endpoint, quadrature = smooth_jump_forms(scalar_viscous, 2.0 * x + 1.0, region)
    assert quadrature == pytest.approx(endpoint, abs=1e-12)


def test_smooth_jump_flags_quadrature_disagreement(scalar_viscous, caplog):
    region = detect_transition_region(scalar_viscous, 0.05)
    x = scalar_viscous.grid.nodes
    with caplog.at_level(logging.INFO, logger="shockadjoint.solvers.viscous_solver"):
        smooth_jump(scalar_viscous, np.full(len(x), 3.0), region)
        assert "quadrature differs" not in caplog.text
        value = smooth_jump(scalar_viscous, x ** 3, region)
    assert "quadrature differs" in caplog.text
    assert value == pytest.approx(region.alpha_plus ** 3 - region.alpha_minus ** 3, rel=1e-12)


def test_field_solution_uid_depends_on_viscosity():
    grid = Grid.uniform(16)
    values = np.zeros((17, 1))
    a = FieldSolution(grid, values, 0.01, True, 0, 0.0)
    b = FieldSolution(grid, values, 0.02, True, 0, 0.0)
    assert a.uid != b.uid
    assert a.uid == FieldSolution(grid, values.copy(), 0.01, True, 3, 0.0).uid
