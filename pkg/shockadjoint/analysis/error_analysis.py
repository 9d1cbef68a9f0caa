"""
Functionals, residual pairings, interior boundary conditions and the error
budget that ties them together.

Exact and perturbed solutions are PiecewiseSolutions and are integrated
branch-wise by adaptive quadrature. Viscous solutions are nodal and use the
trapezoid rule, matching the second-order solver.
"""
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
from scipy.integrate import quad, trapezoid

from shockadjoint.core.errors import (
    InsufficientDataError,
    ShockAdjointError,
    ShockAtThroatError,
    ShockDataError,
)
from shockadjoint.models.balance_models import ModelSpec, NozzleGeometry
from shockadjoint.models.reference_solutions import PerturbationFamily, PiecewiseSolution, probe_grid
from shockadjoint.solvers.adjoint_solver import AdjointSolution
from shockadjoint.solvers.viscous_solver import FieldSolution, TransitionRegion, smooth_jump, smooth_jump_forms

logger = logging.getLogger(__name__)

QUAD_TOLERANCE = 1e-12
QUAD_LIMIT = 200
THROAT_TOLERANCE = 1e-8

Weight = Union[AdjointSolution, Callable[[np.ndarray], np.ndarray]]
Solution = Union[PiecewiseSolution, FieldSolution]


def _integrate(func, lo: float, hi: float, points: Iterable[float] = ()) -> float:
    if hi <= lo:
        return 0.0
    inner = sorted(p for p in points if lo < p < hi)
    value, error = quad(func, lo, hi, epsabs=QUAD_TOLERANCE, epsrel=QUAD_TOLERANCE,
                        limit=QUAD_LIMIT, points=inner or None)
    if error > 1e3 * QUAD_TOLERANCE:
        logger.debug(f"quadrature on [{lo:g}, {hi:g}] reports error estimate {error:.2e}")
    return float(value)


def _on_branch(func):
    return lambda x: float(np.asarray(func(np.array([x]))).reshape(-1)[0])


def _weight_at(z, x: np.ndarray) -> np.ndarray:
    values = np.asarray(z(x), dtype=float)
    return values.reshape(len(x), -1)


def _value_at_shock(z, alpha: float) -> np.ndarray:
    if z is None:
        raise ShockDataError("no adjoint value available at the shock")
    if callable(z):
        return _weight_at(z, np.array([alpha]))[0]
    return np.atleast_1d(np.asarray(z, dtype=float))


# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------

def functional_value(w: Solution, model: ModelSpec) -> float:
    """J_hat(w) = integral of p(w) over [0, 1]."""
    if isinstance(w, FieldSolution):
        model.check_admissible(w.values)
        return float(trapezoid(model.target_integrand(w.values), w.grid.nodes))
    if not isinstance(w, PiecewiseSolution):
        raise ShockDataError(f"cannot integrate a {type(w).__name__}")
    alpha = w.shock_location
    model.check_admissible(w.evaluate(np.linspace(0.0, 1.0, 257)))
    left = _integrate(_on_branch(lambda x: model.target_integrand(w.left_branch(x))), 0.0, alpha)
    right = _integrate(_on_branch(lambda x: model.target_integrand(w.right_branch(x))), alpha, 1.0)
    return left + right


def modified_functional(w: Solution, z_alpha, model: ModelSpec, region: Optional[TransitionRegion] = None) -> float:
    """J(w) = J_hat(w) - z_alpha^T [f(w)]."""
    z_alpha = np.atleast_1d(np.asarray(z_alpha, dtype=float))
    if isinstance(w, PiecewiseSolution):
        flux_jump = w.flux_jump()
    elif isinstance(w, FieldSolution):
        if region is None:
            raise ShockDataError("a viscous solution needs a transition region for the flux jump")
        flux_jump = np.atleast_1d(smooth_jump(w, model.flux(w.values), region))
    else:
        raise ShockDataError(f"no shock data on a {type(w).__name__}")
    return functional_value(w, model) - float(z_alpha @ flux_jump)


# ---------------------------------------------------------------------------
# Residual pairing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualPairing:
    smooth: float
    singular: float

    @property
    def total(self) -> float:
        return self.smooth + self.singular


def _branch_pairing(z, v: PiecewiseSolution, model: ModelSpec, branch, derivative, lo, hi) -> float:
    if isinstance(z, AdjointSolution):
        nodes = z.grid.nodes
        x = np.unique(np.concatenate([[lo, hi], nodes[(nodes > lo) & (nodes < hi)]]))
        residual = model.residual(x, branch(x), derivative(x))
        return float(trapezoid(np.sum(z.interpolate(x) * residual, axis=-1), x))

    def integrand(x):
        at = np.array([x])
        residual = model.residual(at, branch(at), derivative(at))
        return float(np.sum(_weight_at(z, at) * residual))

    return _integrate(integrand, lo, hi, getattr(z, "breakpoints", ()))


def residual_pairing(z: Weight, v: Solution, model: ModelSpec) -> ResidualPairing:
    """Pairing of z with the residual f(v)_x + S(v).

    The smooth part integrates over [0, 1] minus the shock of v; the singular
    part is the shock's distributional contribution z(beta)^T [f(v)].
    """
    if isinstance(v, FieldSolution):
        if isinstance(z, AdjointSolution):
            if not z.grid.same_as(v.grid):
                raise ShockDataError("adjoint and primal live on different grids")
            weights = z.values
        else:
            weights = _weight_at(z, v.grid.nodes)
        residual = np.gradient(model.flux(v.values), v.grid.h, axis=0) + model.source(v.grid.nodes, v.values)
        smooth = float(trapezoid(np.sum(weights * residual, axis=-1), v.grid.nodes))
        return ResidualPairing(smooth, 0.0)
    if not isinstance(v, PiecewiseSolution):
        raise ShockDataError(f"cannot pair a residual with a {type(v).__name__}")

    beta = v.shock_location
    smooth = _branch_pairing(z, v, model, v.left_branch, v.left_derivative, 0.0, beta)
    smooth += _branch_pairing(z, v, model, v.right_branch, v.right_derivative, beta, 1.0)
    singular = float(_value_at_shock(z, beta) @ v.flux_jump())
    return ResidualPairing(smooth, singular)


# ---------------------------------------------------------------------------
# Interior boundary condition
# ---------------------------------------------------------------------------

def _shock_jumps(w: PiecewiseSolution, model: ModelSpec) -> Tuple[np.ndarray, float]:
    if not isinstance(w, PiecewiseSolution):
        raise ShockDataError("one-sided derivatives need a PiecewiseSolution")
    traces = np.stack([w.w_minus, w.w_plus])
    d_minus, d_plus = w.one_sided_derivatives()
    jac = model.flux_jacobian(traces)
    flux_slope_jump = jac[1] @ d_plus - jac[0] @ d_minus
    p = model.target_integrand(traces)
    return flux_slope_jump, float(p[1] - p[0])


def interior_bc_residual(z, w: PiecewiseSolution, model: ModelSpec) -> float:
    """z(alpha)^T [f(w)_x] + [p(w)]; zero when z satisfies the interior boundary condition."""
    flux_slope_jump, target_jump = _shock_jumps(w, model)
    return float(_value_at_shock(z, w.shock_location) @ flux_slope_jump) + target_jump


def internal_term(z, w: PiecewiseSolution, model: ModelSpec) -> float:
    """I(z, w) = -z(alpha)^T [f(w)_x] - [p(w)]."""
    flux_slope_jump, target_jump = _shock_jumps(w, model)
    return -float(_value_at_shock(z, w.shock_location) @ flux_slope_jump) - target_jump


@dataclass(frozen=True)
class IbcReport:
    epsilon: float
    viscous_residual: float
    endpoint_form: float
    euler_z2_gap: Optional[float]
    alpha_hat: float
    alpha_minus: float
    alpha_plus: float
    theta: float
    quadrature_gap: float = 0.0
    adjoint_slope_max: float = 0.0
    flux_remainder: float = 0.0
    proof_identity_gap: float = 0.0

    @property
    def identity_gap(self) -> float:
        return abs(self.viscous_residual - self.endpoint_form)


def discrete_proof_identity(primal: FieldSolution, adjoint: AdjointSolution, region: TransitionRegion,
                            model: ModelSpec) -> Tuple[float, float, float]:
    """[p(w)] - [z^T S(w)] = -eps [z_x^T w_x] summed by parts on the region nodes.

    With D and D2 the central first and second differences, returns

        jump      = sum h (p'(w) Dw - Dz S(w) - z S'(w) Dw)
        endpoint  = -eps sum h (D2z Dw + Dz D2w)
        remainder = sum h Dz (Df(w) - f'(w) Dw)

    jump - endpoint - remainder is a combination of the primal and adjoint
    equations at those nodes, so it vanishes up to the solver residuals.
    The remainder is the flux linearization error of the central scheme.
    """
    n_nodes = len(primal.grid.nodes)
    if region.index_minus < 1 or region.index_plus > n_nodes - 2:
        raise ShockDataError("transition region touches a boundary node")
    i = np.arange(region.index_minus, region.index_plus + 1)
    h = primal.grid.h
    x, w, z = primal.grid.nodes, primal.values, adjoint.values

    def d1(a):
        return (a[i + 1] - a[i - 1]) / (2.0 * h)

    def d2(a):
        return (a[i + 1] - 2.0 * a[i] + a[i - 1]) / (h * h)

    dw, dz = d1(w), d1(z)
    wi, zi, xi = w[i], z[i], x[i]
    jump = h * float(np.sum(
        np.sum(model.target_gradient(wi) * dw, axis=-1)
        - np.sum(dz * model.source(xi, wi), axis=-1)
        - np.einsum("nk,nkl,nl->n", zi, model.source_jacobian(xi, wi), dw)
    ))
    endpoint = -primal.epsilon * h * float(np.sum(d2(z) * dw + dz * d2(w)))
    flux_error = d1(model.flux(w)) - np.einsum("nkl,nl->nk", model.flux_jacobian(wi), dw)
    remainder = h * float(np.sum(dz * flux_error))
    return jump, endpoint, remainder


def euler_z2_gap(adjoint: AdjointSolution, alpha_hat: float, geom: NozzleGeometry) -> float:
    """z_2(alpha_hat) + A(alpha_hat)/A'(alpha_hat)."""
    if adjoint.dimension != 3:
        raise ShockAdjointError(f"z_2 check needs a 3-component adjoint, got d={adjoint.dimension}")
    slope = float(geom.area_derivative(alpha_hat))
    if abs(slope) < THROAT_TOLERANCE:
        raise ShockAtThroatError(f"A'({alpha_hat:g}) = {slope:.2e}; the check is undefined at the throat")
    z2 = float(adjoint.interpolate(alpha_hat)[0, 1])
    return z2 + float(geom.area(alpha_hat)) / slope


def euler_ibc_check(adjoint: AdjointSolution, region: TransitionRegion, geom: NozzleGeometry) -> float:
    return euler_z2_gap(adjoint, region.alpha_hat, geom)


def viscous_ibc_residual(primal: FieldSolution, adjoint: AdjointSolution, region: TransitionRegion, model: ModelSpec) -> IbcReport:
    """[p(w)] - [z^T S(w)] over the transition region, with the endpoint form -eps [z_x^T w_x]."""
    if adjoint.primal_ref != primal.uid:
        raise ShockDataError("adjoint was not computed against this primal")
    nodes = primal.grid.nodes
    if not (0 <= region.index_minus < region.index_hat < region.index_plus < len(nodes)):
        raise ShockDataError("transition region does not bracket its own centre")
    if nodes[region.index_minus] != region.alpha_minus or nodes[region.index_plus] != region.alpha_plus:
        raise ShockDataError("transition region was detected on a different grid")

    w, z = primal.values, adjoint.values
    q = model.target_integrand(w) - np.sum(z * model.source(nodes, w), axis=-1)
    residual = float(smooth_jump(primal, q, region))
    quadrature = float(smooth_jump_forms(primal, q, region)[1])

    flux_weight = np.sum(adjoint.gradient() * primal.gradient(), axis=-1)
    endpoint = -primal.epsilon * float(flux_weight[region.index_plus] - flux_weight[region.index_minus])

    jump, summed_endpoint, remainder = discrete_proof_identity(primal, adjoint, region, model)

    gap = euler_ibc_check(adjoint, region, model.geometry) if model.geometry is not None else None
    return IbcReport(
        epsilon=primal.epsilon,
        viscous_residual=residual,
        endpoint_form=endpoint,
        euler_z2_gap=gap,
        alpha_hat=region.alpha_hat,
        alpha_minus=region.alpha_minus,
        alpha_plus=region.alpha_plus,
        theta=region.theta,
        quadrature_gap=abs(quadrature - residual),
        adjoint_slope_max=float(np.max(np.abs(adjoint.gradient()[region.index_minus:region.index_plus + 1]))),
        flux_remainder=remainder,
        proof_identity_gap=abs(jump - summed_endpoint - remainder),
    )


# ---------------------------------------------------------------------------
# Linearization defects and jump identities
# ---------------------------------------------------------------------------

def flux_jump_linearization_defect(fam: PerturbationFamily) -> np.ndarray:
    """[f(v)] - [f'(w) w_bar] - alpha_bar [f(w)_x].

    The right-side difference is taken at max(alpha, beta) and the left-side
    one at min(alpha, beta), so either sign of alpha_bar works.
    """
    w, v = fam.base, fam.approximation
    model = w.model
    lo = np.array([min(w.shock_location, v.shock_location)])
    hi = np.array([max(w.shock_location, v.shock_location)])
    w_right, w_left = w.right_branch(hi), w.left_branch(lo)
    jac = model.flux_jacobian(np.vstack([w_right, w_left]))
    linear = jac[0] @ (v.right_branch(hi) - w_right)[0] - jac[1] @ (v.left_branch(lo) - w_left)[0]
    return v.flux_jump() - linear - fam.alpha_bar * w.flux_derivative_jump()


def functional_linearization_defect(fam: PerturbationFamily) -> float:
    """J_hat(v) - J_hat(w) - int over the complement of [alpha, beta] of p'(w)(v - w) + alpha_bar [p(w)]."""
    w, v = fam.base, fam.approximation
    model = w.model
    lo = min(w.shock_location, v.shock_location)
    hi = max(w.shock_location, v.shock_location)

    def linear(w_branch, v_branch):
        return _on_branch(lambda x: np.sum(model.target_gradient(w_branch(x)) * (v_branch(x) - w_branch(x))))

    linear_part = _integrate(linear(w.left_branch, v.left_branch), 0.0, lo)
    linear_part += _integrate(linear(w.right_branch, v.right_branch), hi, 1.0)
    change = functional_value(v, model) - functional_value(w, model)
    return change - linear_part + fam.alpha_bar * w.target_jump()


@dataclass(frozen=True)
class EulerJumpChain:
    flux_slope_plus_source: np.ndarray
    source_outer_components: np.ndarray
    momentum_flux_plus_pressure: float

    @property
    def worst(self) -> float:
        return float(max(
            np.max(np.abs(self.flux_slope_plus_source)),
            np.max(np.abs(self.source_outer_components)),
            abs(self.momentum_flux_plus_pressure),
        ))


def euler_jump_chain(w: PiecewiseSolution) -> EulerJumpChain:
    """[f(w)_x] + [S(w)], the first and third components of [S(w)], and [rho u^2] + [p(w)]."""
    if w.model.dimension != 3:
        raise ShockAdjointError("the jump chain applies to the Euler nozzle only")
    source_jump = w.source_jump()
    traces = np.stack([w.w_minus, w.w_plus])
    momentum_flux = traces[:, 1] ** 2 / traces[:, 0]
    return EulerJumpChain(
        flux_slope_plus_source=w.flux_derivative_jump() + source_jump,
        source_outer_components=source_jump[[0, 2]],
        momentum_flux_plus_pressure=float(momentum_flux[1] - momentum_flux[0]) + w.target_jump(),
    )


# ---------------------------------------------------------------------------
# Error budget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorBudget:
    nu: float
    alpha_bar: float
    j_exact: float
    j_approx: float
    modified_exact: float
    modified_approx: float
    residual_term: float
    shock_pairing: float
    internal_term: float
    include_internal: bool
    defect: float
    mu: float

    @property
    def functional_error(self) -> float:
        return self.modified_approx - self.modified_exact

    @property
    def defect_over_nu(self) -> float:
        return self.defect / self.nu if self.nu > 0.0 else math.nan

    @property
    def defect_over_nu2(self) -> float:
        return self.defect / self.nu ** 2 if self.nu > 0.0 else math.nan

    @property
    def effectivity(self) -> float:
        error = self.functional_error
        return self.residual_term / error if error != 0.0 else math.nan

    def as_row(self) -> dict:
        row = asdict(self)
        row.update(
            functional_error=self.functional_error,
            defect_over_nu=self.defect_over_nu,
            defect_over_nu2=self.defect_over_nu2,
            effectivity=self.effectivity,
        )
        return row


def verify_error_representation(
    w: PiecewiseSolution,
    fam: PerturbationFamily,
    z: Weight,
    model: ModelSpec,
    include_internal: bool = True,
    probe_points: int = 10_000,
) -> ErrorBudget:
    """J(v) - J(w) against R(z, v) + alpha_bar I(z, w), with z_alpha = z(alpha)."""
    if fam.base is not w:
        raise ShockDataError("perturbation family was generated from a different exact solution")
    v = fam.approximation
    z_alpha = _value_at_shock(z, w.shock_location)

    j_exact = functional_value(w, model)
    j_approx = functional_value(v, model)
    modified_exact = j_exact - float(z_alpha @ w.flux_jump())
    modified_approx = j_approx - float(z_alpha @ v.flux_jump())
    pairing = residual_pairing(z, v, model)
    internal = internal_term(z, w, model)

    modeled = pairing.smooth + (fam.alpha_bar * internal if include_internal else 0.0)
    defect = (modified_approx - modified_exact) - modeled
    y = probe_grid(probe_points, exclude=(v.shock_location,))
    mu = float(np.max(np.abs(v.branch_residual(y))))
    logger.debug(f"nu={fam.nu:g}: defect {defect:.3e}, R={pairing.smooth:.6e}, I={internal:.6e}")
    return ErrorBudget(
        nu=fam.nu,
        alpha_bar=fam.alpha_bar,
        j_exact=j_exact,
        j_approx=j_approx,
        modified_exact=modified_exact,
        modified_approx=modified_approx,
        residual_term=pairing.smooth,
        shock_pairing=pairing.singular,
        internal_term=internal if include_internal else 0.0,
        include_internal=include_internal,
        defect=defect,
        mu=mu,
    )


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceFit:
    slope: float
    intercept: float
    r2: float
    used: int
    excluded: int


def fit_convergence_rate(pairs: Sequence[Tuple[float, float]]) -> ConvergenceFit:
    """Least-squares slope of log|value| against log(scale)."""
    usable: List[Tuple[float, float]] = []
    excluded = 0
    for scale, value in pairs:
        if scale <= 0.0:
            raise ShockAdjointError(f"scales must be positive, got {scale}")
        if value is None or value == 0.0 or not math.isfinite(value):
            logger.warning(f"fit: dropping pair at scale {scale:g} with value {value}")
            excluded += 1
            continue
        usable.append((scale, value))
    if len(usable) < 3:
        raise InsufficientDataError(f"need at least 3 usable pairs for a fit, got {len(usable)}")

    log_scale = np.log([s for s, _ in usable])
    log_value = np.log(np.abs([v for _, v in usable]))
    slope, intercept = np.polyfit(log_scale, log_value, 1)
    predicted = slope * log_scale + intercept
    ss_res = float(np.sum((log_value - predicted) ** 2))
    ss_tot = float(np.sum((log_value - log_value.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 1.0
    return ConvergenceFit(float(slope), float(intercept), r2, len(usable), excluded)


def refinement_order(solutions: Sequence) -> float:
    """Observed order from three nested grids h, h/2, h/4 (max norm on the coarse nodes)."""
    if len(solutions) != 3:
        raise InsufficientDataError("refinement order needs exactly three solutions")
    coarse, mid, fine = solutions
    if mid.grid.cells != 2 * coarse.grid.cells or fine.grid.cells != 2 * mid.grid.cells:
        raise ShockAdjointError("grids must be nested by halving")
    first = float(np.max(np.abs(coarse.values - mid.values[::2])))
    second = float(np.max(np.abs(mid.values[::2] - fine.values[::4])))
    if second == 0.0:
        raise InsufficientDataError("finest differences vanish; order undefined")
    return math.log2(first / second)
