import dataclasses
import math

import numpy as np
import pytest

from shockadjoint.analysis.error_analysis import (
    discrete_proof_identity,
    euler_ibc_check,
    euler_jump_chain,
    fit_convergence_rate,
    flux_jump_linearization_defect,
    functional_linearization_defect,
    functional_value,
    interior_bc_residual,
    internal_term,
    modified_functional,
    refinement_order,
    residual_pairing,
    verify_error_representation,
    viscous_ibc_residual,
)
from shockadjoint.core.errors import (
    InsufficientDataError,
    ShockAdjointError,
    ShockAtThroatError,
    ShockDataError,
)
from shockadjoint.models.balance_models import NozzleGeometry
from shockadjoint.models.reference_solutions import PiecewiseSolution, generate_perturbation
from shockadjoint.solvers.adjoint_solver import (
    AdjointSolution,
    offset_adjoint_anchor,
    scalar_inviscid_adjoint_oracle,
    solve_viscous_adjoint,
)
from shockadjoint.solvers.viscous_solver import FieldSolution, Grid, TransitionRegion, detect_transition_region

from tests.conftest import SCALAR_FUNCTIONAL, SCALAR_IBC_VALUE, SCALAR_SHOCK, SCALAR_TARGET_JUMP

NU_SWEEP = [1e-2 * 0.5 ** k for k in range(6)]


def _zero_weight(x):
    return np.zeros((len(x), 1))


@pytest.fixture(scope="module")
def ibc_oracle(scalar, manufactured):
    return scalar_inviscid_adjoint_oracle(scalar, manufactured, (SCALAR_SHOCK, offset_adjoint_anchor(manufactured)[0]))


@pytest.fixture(scope="module")
def offset_oracle(scalar, manufactured):
    anchor = offset_adjoint_anchor(manufactured, 0.1)[0]
    return scalar_inviscid_adjoint_oracle(scalar, manufactured, (SCALAR_SHOCK, anchor))


@pytest.fixture(scope="module")
def budgets(scalar, manufactured, ibc_oracle):
    return [
        verify_error_representation(manufactured, generate_perturbation(manufactured, nu), ibc_oracle, scalar)
        for nu in NU_SWEEP
    ]


def _region(alpha_hat, cells=100):
    x = np.linspace(0.0, 1.0, cells + 1)
    i = int(round(alpha_hat * cells))
    return TransitionRegion(x[i - 2], x[i + 2], x[i], 1.0, i - 2, i, i + 2, 0.05)


# --- functionals --------------------------------------------------------------

def test_functional_of_manufactured_solution(scalar, manufactured):
    assert functional_value(manufactured, scalar) == pytest.approx(SCALAR_FUNCTIONAL, abs=1e-10)
    assert SCALAR_FUNCTIONAL == pytest.approx(-0.147333, abs=1e-6)


def test_functional_of_constant_integrand(scalar, manufactured):
    constant = dataclasses.replace(scalar, target_integrand=lambda w: np.full(np.shape(w)[:-1], 2.5))
    assert functional_value(manufactured, constant) == pytest.approx(2.5, abs=1e-12)


def test_functional_of_nodal_solution(scalar):
    grid = Grid.uniform(1000)
    sol = FieldSolution(grid, (1.2 - grid.nodes)[:, None], 0.01, True, 0, 0.0)
    expected = (1.2 ** 4 - 0.2 ** 4) / 12.0
    assert functional_value(sol, scalar) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("z_alpha", [0.0, 0.5, -3.0])
def test_modified_functional_of_exact_solution(scalar, manufactured, z_alpha):
    assert modified_functional(manufactured, z_alpha, scalar) == pytest.approx(SCALAR_FUNCTIONAL, abs=1e-12)


def test_modified_functional_charges_rankine_hugoniot_violation(scalar, manufactured):
    def right(x):
        return (-0.3 - x)[:, None]

    wrong = PiecewiseSolution(
        scalar, manufactured.left_branch, right, manufactured.left_derivative, manufactured.right_derivative, SCALAR_SHOCK
    )
    assert wrong.flux_jump()[0] == pytest.approx(-0.075)
    expected = functional_value(wrong, scalar) + 0.075
    assert modified_functional(wrong, 1.0, scalar) == pytest.approx(expected, abs=1e-12)


def test_modified_functional_of_viscous_solution_needs_region(scalar, scalar_viscous):
    with pytest.raises(ShockDataError):
        modified_functional(scalar_viscous, 0.2, scalar)
    region = detect_transition_region(scalar_viscous, 0.05)
    value = modified_functional(scalar_viscous, SCALAR_IBC_VALUE, scalar, region)
    assert math.isfinite(value)


# --- residual pairing ---------------------------------------------------------

def test_pairing_with_exact_solution_vanishes(scalar, manufactured, ibc_oracle):
    pairing = residual_pairing(ibc_oracle, manufactured, scalar)
    assert pairing.smooth == pytest.approx(0.0, abs=1e-14)
    assert pairing.singular == pytest.approx(0.0, abs=1e-14)


def test_pairing_with_zero_weight_vanishes(scalar, manufactured):
    fam = generate_perturbation(manufactured, 1e-2)
    assert residual_pairing(_zero_weight, fam.approximation, scalar).total == 0.0


def test_pairing_grid_mismatch(scalar, scalar_viscous):
    z = AdjointSolution(Grid.uniform(64), np.zeros((65, 1)), 0.01, scalar_viscous.uid, "dirichlet-zero", 0.0)
    with pytest.raises(ShockDataError):
        residual_pairing(z, scalar_viscous, scalar)


def test_pairing_uses_shock_value_for_singular_part(scalar, manufactured):
    def right(x):
        return (-0.3 - x)[:, None]

    wrong = PiecewiseSolution(
        scalar, manufactured.left_branch, right, manufactured.left_derivative, manufactured.right_derivative, SCALAR_SHOCK
    )

    def unit_weight(x):
        return np.ones((len(x), 1))

    pairing = residual_pairing(unit_weight, wrong, scalar)
    assert pairing.singular == pytest.approx(-0.075)
    # right branch residual: (-0.3 - x)(-1) + (-0.3 - x) = 0
    assert pairing.smooth == pytest.approx(0.0, abs=1e-12)


# --- interior boundary condition ----------------------------------------------

def test_internal_term_vanishes_for_ibc_adjoint(scalar, manufactured, ibc_oracle):
    assert internal_term(ibc_oracle, manufactured, scalar) == pytest.approx(0.0, abs=1e-12)
    assert interior_bc_residual(ibc_oracle, manufactured, scalar) == pytest.approx(0.0, abs=1e-12)
    assert ibc_oracle.shock_value == pytest.approx(0.213333, abs=1e-6)


def test_internal_term_of_zero_weight(scalar, manufactured):
    value = internal_term(_zero_weight, manufactured, scalar)
    assert value == pytest.approx(-SCALAR_TARGET_JUMP)
    assert value == pytest.approx(0.341333, abs=1e-6)
    assert interior_bc_residual(_zero_weight, manufactured, scalar) == -value


def test_internal_term_of_offset_adjoint(scalar, manufactured, offset_oracle):
    assert internal_term(offset_oracle, manufactured, scalar) == pytest.approx(0.1, abs=1e-12)


def test_internal_term_accepts_plain_values(scalar, manufactured):
    assert internal_term(np.array([SCALAR_IBC_VALUE]), manufactured, scalar) == pytest.approx(0.0, abs=1e-14)


def test_internal_term_needs_shock_data(scalar, scalar_viscous):
    with pytest.raises(ShockDataError):
        internal_term(_zero_weight, scalar_viscous, scalar)


def test_euler_check_on_exact_z2():
    geom = NozzleGeometry()
    grid = Grid.uniform(100)
    values = np.zeros((101, 3))
    values[:, 1] = -float(geom.area(0.75) / geom.area_derivative(0.75))
    z = AdjointSolution(grid, values, 0.01, "primal", "linearized-characteristic", 0.0)
    assert values[0, 1] == pytest.approx(-2.625)
    assert euler_ibc_check(z, _region(0.75), geom) == pytest.approx(0.0, abs=1e-12)


def test_euler_check_undefined_at_throat():
    z = AdjointSolution(Grid.uniform(100), np.zeros((101, 3)), 0.01, "primal", "dirichlet-zero", 0.0)
    with pytest.raises(ShockAtThroatError):
        euler_ibc_check(z, _region(0.5), NozzleGeometry())


def test_euler_check_needs_three_components():
    z = AdjointSolution(Grid.uniform(100), np.zeros((101, 1)), 0.01, "primal", "dirichlet-zero", 0.0)
    with pytest.raises(ShockAdjointError):
        euler_ibc_check(z, _region(0.75), NozzleGeometry())


def test_viscous_ibc_residual_without_target(scalar, scalar_viscous):
    silent = dataclasses.replace(
        scalar,
        target_integrand=lambda w: np.zeros(np.shape(w)[:-1]),
        target_gradient=lambda w: np.zeros(np.shape(w)),
    )
    z = solve_viscous_adjoint(silent, scalar_viscous)
    region = detect_transition_region(scalar_viscous, 0.05)
    report = viscous_ibc_residual(scalar_viscous, z, region, silent)
    assert report.viscous_residual == 0.0
    assert report.endpoint_form == 0.0
    assert report.euler_z2_gap is None
    assert report.epsilon == scalar_viscous.epsilon


def test_viscous_ibc_report_fields(scalar, scalar_viscous, scalar_viscous_adjoint):
    region = detect_transition_region(scalar_viscous, 0.05)
    report = viscous_ibc_residual(scalar_viscous, scalar_viscous_adjoint, region, scalar)
    assert math.isfinite(report.viscous_residual)
    assert math.isfinite(report.endpoint_form)
    assert report.identity_gap == abs(report.viscous_residual - report.endpoint_form)
    assert report.alpha_minus < report.alpha_hat < report.alpha_plus


def test_discrete_proof_identity_holds_to_solver_tolerance(scalar, scalar_viscous, scalar_viscous_adjoint):
    region = detect_transition_region(scalar_viscous, 0.05)
    report = viscous_ibc_residual(scalar_viscous, scalar_viscous_adjoint, region, scalar)
    assert report.proof_identity_gap <= 1e-8
    # The pointwise endpoint form only agrees up to the central-difference flux error.
    assert abs(report.flux_remainder) > 1e-8
    assert report.identity_gap > report.proof_identity_gap


def test_discrete_proof_identity_needs_a_consistent_adjoint(scalar, scalar_viscous, scalar_viscous_adjoint):
    region = detect_transition_region(scalar_viscous, 0.05)
    scaled = dataclasses.replace(scalar_viscous_adjoint, values=1.01 * scalar_viscous_adjoint.values)
    jump, endpoint, remainder = discrete_proof_identity(scalar_viscous, scaled, region, scalar)
    assert abs(jump - endpoint - remainder) > 1e-6


def test_viscous_ibc_residual_rejects_foreign_adjoint(scalar, scalar_viscous, scalar_viscous_adjoint):
    foreign = dataclasses.replace(scalar_viscous_adjoint, primal_ref="0" * 16)
    region = detect_transition_region(scalar_viscous, 0.05)
    with pytest.raises(ShockDataError):
        viscous_ibc_residual(scalar_viscous, foreign, region, scalar)


def test_viscous_ibc_residual_rejects_foreign_region(scalar, scalar_viscous, scalar_viscous_adjoint):
    with pytest.raises(ShockDataError):
        viscous_ibc_residual(scalar_viscous, scalar_viscous_adjoint, _region(0.4, cells=64), scalar)


# --- linearization defects ----------------------------------------------------

def test_zero_perturbation_has_no_defects(manufactured):
    fam = generate_perturbation(manufactured, 0.0, alpha_bar=0.0)
    np.testing.assert_allclose(flux_jump_linearization_defect(fam), 0.0, atol=1e-14)
    assert functional_linearization_defect(fam) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("coupling", [0.5, -0.5])
def test_linearization_defects_are_second_order(manufactured, coupling):
    flux_defects, functional_defects = [], []
    for nu in NU_SWEEP[:4]:
        fam = generate_perturbation(manufactured, nu, coupling=coupling)
        flux_defects.append(float(np.max(np.abs(flux_jump_linearization_defect(fam)))))
        functional_defects.append(abs(functional_linearization_defect(fam)))
    for defects in (flux_defects, functional_defects):
        for big, small in zip(defects, defects[1:]):
            assert big >= 1.5 * small


def test_euler_jump_chain(nozzle):
    chain = euler_jump_chain(nozzle)
    assert chain.worst < 1e-10
    assert chain.source_outer_components.shape == (2,)


def test_jump_chain_is_euler_only(manufactured):
    with pytest.raises(ShockAdjointError):
        euler_jump_chain(manufactured)


# --- error budget -------------------------------------------------------------

def test_budget_of_unperturbed_solution(scalar, manufactured, ibc_oracle):
    fam = generate_perturbation(manufactured, 0.0, alpha_bar=0.0)
    budget = verify_error_representation(manufactured, fam, ibc_oracle, scalar)
    assert budget.j_approx == pytest.approx(budget.j_exact, abs=1e-14)
    assert budget.defect == pytest.approx(0.0, abs=1e-12)
    assert budget.mu == pytest.approx(0.0, abs=1e-14)
    assert math.isnan(budget.defect_over_nu)
    assert math.isnan(budget.effectivity)


def test_budget_rejects_foreign_family(scalar, manufactured, ibc_oracle):
    other = PiecewiseSolution(
        scalar, manufactured.left_branch, manufactured.right_branch,
        manufactured.left_derivative, manufactured.right_derivative, SCALAR_SHOCK,
    )
    fam = generate_perturbation(other, 1e-3)
    with pytest.raises(ShockDataError):
        verify_error_representation(manufactured, fam, ibc_oracle, scalar)


def test_defect_is_higher_order(budgets):
    ratios = [abs(b.defect_over_nu) for b in budgets]
    for big, small in zip(ratios, ratios[1:]):
        assert big >= 1.5 * small


def test_effectivity_tends_to_one(budgets):
    assert 0.9 <= budgets[-1].effectivity <= 1.1
    assert abs(budgets[-1].effectivity - 1.0) <= abs(budgets[0].effectivity - 1.0)


def test_residual_is_first_order(budgets):
    scaled = [b.mu / b.nu for b in budgets]
    assert max(scaled) / min(scaled) < 2.0


def test_budget_row_has_derived_columns(budgets):
    row = budgets[0].as_row()
    for column in ("nu", "alpha_bar", "defect", "functional_error", "defect_over_nu", "defect_over_nu2", "effectivity"):
        assert column in row
    assert row["alpha_bar"] == pytest.approx(0.5 * row["nu"])
    assert row["shock_pairing"] == pytest.approx(budgets[0].shock_pairing)


def test_offset_adjoint_defect_plateaus(scalar, manufactured, offset_oracle):
    plateaus = []
    for nu in NU_SWEEP:
        fam = generate_perturbation(manufactured, nu, coupling=0.5)
        budget = verify_error_representation(manufactured, fam, offset_oracle, scalar, include_internal=False)
        plateaus.append(budget.defect_over_nu)
    assert plateaus[-1] == pytest.approx(0.5 * 0.1, rel=0.1)


def test_excluded_internal_term_is_reported_as_zero(scalar, manufactured, offset_oracle):
    fam = generate_perturbation(manufactured, 0.01, coupling=0.5)
    kept = verify_error_representation(manufactured, fam, offset_oracle, scalar)
    dropped = verify_error_representation(manufactured, fam, offset_oracle, scalar, include_internal=False)
    assert kept.internal_term == pytest.approx(0.1, rel=1e-6)
    assert dropped.internal_term == 0.0
    assert not dropped.include_internal
    assert dropped.defect - kept.defect == pytest.approx(fam.alpha_bar * kept.internal_term, abs=1e-12)


# --- rates --------------------------------------------------------------------

@pytest.mark.parametrize("power", [1.0, 2.0])
def test_fit_recovers_power(power):
    scales = [0.1, 0.05, 0.025, 0.0125]
    fit = fit_convergence_rate([(s, 3.0 * s ** power) for s in scales])
    assert fit.slope == pytest.approx(power)
    assert fit.intercept == pytest.approx(math.log(3.0))
    assert fit.r2 == pytest.approx(1.0)
    assert (fit.used, fit.excluded) == (4, 0)


def test_fit_uses_magnitudes():
    fit = fit_convergence_rate([(0.1, -0.1), (0.05, -0.05), (0.025, -0.025)])
    assert fit.slope == pytest.approx(1.0)


def test_fit_drops_zero_and_non_finite_values(caplog):
    pairs = [(0.1, 0.1), (0.05, 0.0), (0.025, 0.025), (0.0125, float("nan")), (0.00625, 0.00625)]
    fit = fit_convergence_rate(pairs)
    assert (fit.used, fit.excluded) == (3, 2)
    assert fit.slope == pytest.approx(1.0)
    assert "dropping" in caplog.text


def test_fit_constant_values_has_unit_r2():
    fit = fit_convergence_rate([(0.1, 2.0), (0.05, 2.0), (0.025, 2.0), (0.0125, 2.0)])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert fit.r2 == 1.0


def test_fit_needs_three_points():
    with pytest.raises(InsufficientDataError):
        fit_convergence_rate([(0.1, 0.1), (0.05, 0.0), (0.025, 0.025)])


def test_fit_rejects_nonpositive_scale():
    with pytest.raises(ShockAdjointError):
        fit_convergence_rate([(0.0, 0.1), (0.05, 0.05), (0.025, 0.025)])


def test_refinement_order_of_second_order_error():
    solutions = []
    for cells in (32, 64, 128):
        grid = Grid.uniform(cells)
        h = grid.h
        values = (np.sin(grid.nodes) + h * h * np.cos(grid.nodes))[:, None]
        solutions.append(FieldSolution(grid, values, 0.01, True, 0, 0.0))
    assert refinement_order(solutions) == pytest.approx(2.0, abs=1e-10)


def test_refinement_order_needs_nested_grids():
    sols = [FieldSolution(Grid.uniform(c), np.zeros((c + 1, 1)), 0.01, True, 0, 0.0) for c in (32, 48, 128)]
    with pytest.raises(ShockAdjointError):
        refinement_order(sols)
    with pytest.raises(InsufficientDataError):
        refinement_order(sols[:2])
