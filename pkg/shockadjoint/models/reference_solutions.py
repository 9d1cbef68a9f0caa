"""
Exact shocked reference solutions and their perturbed approximations.

A PiecewiseSolution is two smooth branches joined at a single shock. The
nozzle solution is built from the isentropic area-Mach relation on each side
of a normal shock, placed by bisection on the outflow pressure. Perturbed
approximations v are defined through a coordinate transform that moves the
shock: v(xi(x)) = w(x) + nu * g(x).
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Tuple
import logging

import numpy as np
from scipy.optimize import bisect, brentq

from shockadjoint.core.errors import (
    DomainError,
    NoTransonicSolutionError,
    ShockAtThroatError,
    ShockDataError,
    TransformError,
)
from shockadjoint.models.balance_models import (
    BoundaryData,
    EulerParams,
    ModelSpec,
    NozzleGeometry,
    euler_model,
    euler_pressure,
    euler_state_from_primitive,
    scalar_model,
)

logger = logging.getLogger(__name__)

Branch = Callable[[np.ndarray], np.ndarray]

SCALAR_SHOCK = 0.4
SHOCK_POSITION_XTOL = 1e-14
THROAT_SLOPE_CUTOFF = 1e-9
SHOCK_WINDOW = 1e-9


def _as_positions(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class PiecewiseSolution:
    """Two smooth branches with one discontinuity at shock_location."""

    model: ModelSpec
    left_branch: Branch
    right_branch: Branch
    left_derivative: Branch
    right_derivative: Branch
    shock_location: float
    label: str = "w"

    def _split(self, x, left_func, right_func) -> np.ndarray:
        x = _as_positions(x)
        out = np.empty(x.shape + (self.model.dimension,))
        left = x < self.shock_location
        if np.any(left):
            out[left] = left_func(x[left])
        if np.any(~left):
            out[~left] = right_func(x[~left])
        return out

    def evaluate(self, x) -> np.ndarray:
        """Values at x; the shock point itself belongs to the right branch."""
        return self._split(x, self.left_branch, self.right_branch)

    def derivative(self, x) -> np.ndarray:
        return self._split(x, self.left_derivative, self.right_derivative)

    def branch_residual(self, x) -> np.ndarray:
        """f'(w) w_x + S(x, w) evaluated on the branch owning each x."""
        x = _as_positions(x)
        return self.model.residual(x, self.evaluate(x), self.derivative(x))

    @property
    def w_minus(self) -> np.ndarray:
        return self.left_branch(_as_positions(self.shock_location))[0]

    @property
    def w_plus(self) -> np.ndarray:
        return self.right_branch(_as_positions(self.shock_location))[0]

    def one_sided_derivatives(self) -> Tuple[np.ndarray, np.ndarray]:
        at = _as_positions(self.shock_location)
        return self.left_derivative(at)[0], self.right_derivative(at)[0]

    def flux_jump(self) -> np.ndarray:
        return rankine_hugoniot_residual(self.w_minus, self.w_plus, self.model)

    def flux_derivative_jump(self) -> np.ndarray:
        """[f(w)_x] from the analytic branch derivatives."""
        d_minus, d_plus = self.one_sided_derivatives()
        jac = self.model.flux_jacobian(np.stack([self.w_minus, self.w_plus]))
        return jac[1] @ d_plus - jac[0] @ d_minus

    def source_jump(self) -> np.ndarray:
        at = np.full(2, self.shock_location)
        s = self.model.source(at, np.stack([self.w_minus, self.w_plus]))
        return s[1] - s[0]

    def target_jump(self) -> float:
        p = self.model.target_integrand(np.stack([self.w_minus, self.w_plus]))
        return float(p[1] - p[0])


def rankine_hugoniot_residual(w_minus, w_plus, model: ModelSpec) -> np.ndarray:
    """f(w_plus) - f(w_minus)."""
    states = np.stack([np.asarray(w_minus, dtype=float), np.asarray(w_plus, dtype=float)])
    model.check_admissible(states)
    flux = model.flux(states)
    return flux[1] - flux[0]


# ---------------------------------------------------------------------------
# Scalar manufactured solution
# ---------------------------------------------------------------------------

def manufactured_scalar_solution(model: Optional[ModelSpec] = None) -> PiecewiseSolution:
    """w = 1.2 - x left of 0.4, w = -0.4 - x right of it."""
    model = model or scalar_model()

    def left(x):
        return (1.2 - x)[:, None]

    def right(x):
        return (-0.4 - x)[:, None]

    def slope(x):
        return -np.ones((len(x), 1))

    return PiecewiseSolution(model, left, right, slope, slope, SCALAR_SHOCK, label="manufactured")


# ---------------------------------------------------------------------------
# Isentropic and normal-shock relations
# ---------------------------------------------------------------------------

def _log_area_mach(mu: float, gamma: float) -> float:
    """log(A/A*) as a function of mu = M - 1, written to keep precision near M = 1."""
    a = (gamma - 1.0) / (gamma + 1.0)
    q = (gamma + 1.0) / (2.0 * (gamma - 1.0))
    return -np.log1p(mu) + q * np.log1p(a * mu * (2.0 + mu))


def _signed_area_root(mu: float, gamma: float) -> float:
    return float(np.sign(mu) * np.sqrt(max(_log_area_mach(mu, gamma), 0.0)))


def mach_offset_from_area(log_ratio: float, supersonic: bool, gamma: float) -> float:
    """Solve the area-Mach relation for mu = M - 1 on the requested branch."""
    if log_ratio < -1e-14:
        raise DomainError(f"area below the critical area (log ratio {log_ratio:.3e})")
    target = np.sqrt(max(log_ratio, 0.0))
    if supersonic:
        lo, hi = 0.0, 49.0
    else:
        lo, hi, target = -1.0 + 1e-12, 0.0, -target
    return brentq(lambda mu: _signed_area_root(mu, gamma) - target, lo, hi, xtol=1e-16, maxiter=200)


def normal_shock_mach(m1, gamma: float):
    k = 0.5 * (gamma - 1.0)
    return np.sqrt((1.0 + k * m1 * m1) / (gamma * m1 * m1 - k))


def normal_shock_total_pressure_ratio(m1, gamma: float):
    """p_t2 / p_t1 across a normal shock with upstream Mach m1."""
    gp1, gm1 = gamma + 1.0, gamma - 1.0
    compression = (0.5 * gp1 * m1 * m1) / (1.0 + 0.5 * gm1 * m1 * m1)
    strength = (2.0 * gamma / gp1) * m1 * m1 - gm1 / gp1
    return compression ** (gamma / gm1) * strength ** (-1.0 / gm1)


def stagnation_state(inflow_entropy: float, inflow_enthalpy: float, params: EulerParams) -> Tuple[float, float]:
    """Total pressure and density matching the inflow entropy and enthalpy."""
    g = params.gamma
    temperature = inflow_enthalpy * (g - 1.0) / g
    entropy_constant = np.exp((inflow_entropy - params.alpha1) / params.alpha0)
    rho_t = (temperature / entropy_constant) ** (1.0 / (g - 1.0))
    return float(rho_t * temperature), float(rho_t)


@dataclass(frozen=True)
class IsentropicBranch:
    """Smooth isentropic nozzle flow for fixed stagnation data and critical area."""

    geometry: NozzleGeometry
    params: EulerParams
    total_pressure: float
    total_density: float
    critical_area: float
    transonic: bool

    def mach_offset(self, x) -> np.ndarray:
        x = _as_positions(x)
        log_ratio = self.geometry.log_area_ratio(x, self.critical_area)
        supersonic = self.transonic & (x > self.geometry.throat)
        gamma = self.params.gamma
        return np.array([mach_offset_from_area(lr, sup, gamma) for lr, sup in zip(log_ratio, supersonic)])

    def _primitive(self, mu):
        g = self.params.gamma
        mach = 1.0 + mu
        theta = 1.0 / (1.0 + 0.5 * (g - 1.0) * mach * mach)
        p = self.total_pressure * theta ** (g / (g - 1.0))
        rho = self.total_density * theta ** (1.0 / (g - 1.0))
        c = np.sqrt(g * p / rho)
        return mach, theta, rho, mach * c, p, c

    def state(self, x) -> np.ndarray:
        _, _, rho, u, p, _ = self._primitive(self.mach_offset(x))
        return euler_state_from_primitive(rho, u, p, self.params)

    def mach_slope(self, x, mu) -> np.ndarray:
        g = self.params.gamma
        mach = 1.0 + mu
        sonic_gap = -mu * (2.0 + mu)
        near_throat = np.abs(mu) < THROAT_SLOPE_CUTOFF
        throat_slope = np.sqrt((g + 1.0) * self.geometry.area_second_derivative(x) / (4.0 * self.critical_area))
        safe_gap = np.where(near_throat, 1.0, sonic_gap)
        slope = -self.geometry.source_factor(x) * mach * (1.0 + 0.5 * (g - 1.0) * mach * mach) / safe_gap
        return np.where(near_throat, throat_slope, slope)

    def derivative(self, x) -> np.ndarray:
        x = _as_positions(x)
        mu = self.mach_offset(x)
        g = self.params.gamma
        mach, theta, rho, u, p, c = self._primitive(mu)
        dp = -g * p * mach * theta
        drho = -rho * mach * theta
        du = c * theta
        dm = rho * c * theta * (-mu * (2.0 + mu))
        d_energy = dp / (g - 1.0) + 0.5 * u * u * drho + rho * u * du
        return np.stack([drho, dm, d_energy], axis=-1) * self.mach_slope(x, mu)[:, None]


@dataclass(frozen=True)
class NozzleShockData:
    upstream: IsentropicBranch
    downstream: IsentropicBranch
    shock_location: float
    pressure_range: Tuple[float, float]


def _downstream_branch(upstream: IsentropicBranch, alpha: float) -> IsentropicBranch:
    m1 = 1.0 + upstream.mach_offset(alpha)[0]
    ratio = float(normal_shock_total_pressure_ratio(m1, upstream.params.gamma))
    return IsentropicBranch(
        geometry=upstream.geometry,
        params=upstream.params,
        total_pressure=upstream.total_pressure * ratio,
        total_density=upstream.total_density * ratio,
        critical_area=upstream.critical_area / ratio,
        transonic=False,
    )


def _exit_pressure(upstream: IsentropicBranch, alpha: float) -> float:
    branch = _downstream_branch(upstream, alpha)
    return float(euler_pressure(branch.state(1.0)[0], upstream.params))


@lru_cache(maxsize=16)
def _locate_nozzle_shock(geom: NozzleGeometry, bd: BoundaryData, params: EulerParams) -> NozzleShockData:
    p_t, rho_t = stagnation_state(bd.inflow_entropy, bd.inflow_enthalpy, params)
    upstream = IsentropicBranch(geom, params, p_t, rho_t, geom.throat_area, transonic=True)

    lo, hi = geom.throat, 1.0
    p_weakest, p_strongest = _exit_pressure(upstream, lo), _exit_pressure(upstream, hi)
    p0 = bd.outflow_pressure
    if not p_strongest < p0 < p_weakest:
        raise NoTransonicSolutionError(
            f"No shock inside the diverging section for outflow pressure {p0:.6g}; "
            f"a transonic shocked flow needs p0 in ({p_strongest:.6g}, {p_weakest:.6g})"
        )

    alpha = bisect(lambda a: _exit_pressure(upstream, a) - p0, lo, hi, xtol=SHOCK_POSITION_XTOL)
    if abs(float(geom.area_derivative(alpha))) < 1e-8:
        raise ShockAtThroatError(f"Shock at x={alpha:.12f} coincides with the throat (A'(alpha) = 0)")

    logger.info(f"Nozzle shock located at x={alpha:.12f} for p0={p0:g}")
    return NozzleShockData(upstream, _downstream_branch(upstream, alpha), float(alpha), (p_strongest, p_weakest))


def valid_outflow_pressure_range(geom: NozzleGeometry, bd: BoundaryData, params: EulerParams) -> Tuple[float, float]:
    p_t, rho_t = stagnation_state(bd.inflow_entropy, bd.inflow_enthalpy, params)
    upstream = IsentropicBranch(geom, params, p_t, rho_t, geom.throat_area, transonic=True)
    return _exit_pressure(upstream, 1.0), _exit_pressure(upstream, geom.throat)


def nozzle_exact_solution(
    geom: NozzleGeometry,
    bd: BoundaryData,
    params: EulerParams,
    model: Optional[ModelSpec] = None,
) -> PiecewiseSolution:
    """Transonic nozzle flow with a single normal shock in the diverging section."""
    data = _locate_nozzle_shock(geom, bd, params)
    model = model or euler_model(params, geom, bd)
    return PiecewiseSolution(
        model=model,
        left_branch=data.upstream.state,
        right_branch=data.downstream.state,
        left_derivative=data.upstream.derivative,
        right_derivative=data.downstream.derivative,
        shock_location=data.shock_location,
        label="nozzle",
    )


@lru_cache(maxsize=16)
def reference_solution_for(model: ModelSpec) -> PiecewiseSolution:
    if model.geometry is None:
        return manufactured_scalar_solution(model)
    return nozzle_exact_solution(model.geometry, model.boundary, model.params, model=model)


# ---------------------------------------------------------------------------
# Coordinate transforms and perturbations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoordinateTransform:
    """xi(x) = a x + b x (x - alpha), a = beta/alpha, b = (1 - a)/(1 - alpha).

    Maps [0, alpha] onto [0, beta] (xi1) and [alpha, 1] onto [beta, 1] (xi2).
    """

    alpha: float
    beta: float

    @property
    def a(self) -> float:
        return self.beta / self.alpha

    @property
    def b(self) -> float:
        return (1.0 - self.a) / (1.0 - self.alpha)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.a * x + self.b * x * (x - self.alpha)

    def derivative(self, x):
        return self.a + self.b * (2.0 * np.asarray(x, dtype=float) - self.alpha)

    def second_derivative(self, x):
        return np.full_like(np.asarray(x, dtype=float), 2.0 * self.b)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        s = self.a - self.b * self.alpha
        return 2.0 * y / (s + np.sqrt(s * s + 4.0 * self.b * y))

    def xi1(self, x):
        return self(np.clip(x, 0.0, self.alpha))

    def xi2(self, x):
        return self(np.clip(x, self.alpha, 1.0))


def make_transform(alpha: float, beta: float) -> CoordinateTransform:
    for name, value in (("alpha", alpha), ("beta", beta)):
        if not 0.0 < value < 1.0:
            raise TransformError(f"{name}={value} must lie in (0, 1)")
    transform = CoordinateTransform(float(alpha), float(beta))
    if min(transform.derivative(0.0), transform.derivative(1.0)) <= 0.0:
        raise TransformError(
            f"transform for alpha={alpha}, beta={beta} is not monotone on [0, 1]; "
            f"beta must lie in ({alpha * alpha:.6g}, {alpha * (2.0 - alpha):.6g})"
        )
    return transform


def sine_bump(branch: Branch, derivative: Branch) -> Tuple[Branch, Branch]:
    """g(x) = sin(pi x) |w(x)| on one branch, with its derivative."""

    def bump(x):
        return np.sin(np.pi * x)[:, None] * np.abs(branch(x))

    def bump_derivative(x):
        w = branch(x)
        return (np.pi * np.cos(np.pi * x))[:, None] * np.abs(w) + np.sin(np.pi * x)[:, None] * np.sign(w) * derivative(x)

    return bump, bump_derivative


@dataclass(frozen=True, eq=False)
class PerturbationFamily:
    base: PiecewiseSolution
    nu: float
    alpha_bar: float
    transform: CoordinateTransform
    approximation: PiecewiseSolution

    @property
    def beta(self) -> float:
        return self.transform.beta


def _perturbed_branch(branch, derivative, transform, nu):
    bump, bump_derivative = sine_bump(branch, derivative)

    def value(y):
        x = transform.inverse(y)
        return branch(x) + nu * bump(x)

    def slope(y):
        x = transform.inverse(y)
        return (derivative(x) + nu * bump_derivative(x)) / transform.derivative(x)[:, None]

    return value, slope


def generate_perturbation(
    base: PiecewiseSolution,
    nu: float,
    alpha_bar: Optional[float] = None,
    coupling: float = 0.5,
) -> PerturbationFamily:
    """Approximation v with v(xi(x)) = w(x) + nu g(x) and shock moved to alpha + alpha_bar."""
    if nu < 0.0:
        raise TransformError(f"nu must be nonnegative, got {nu}")
    if alpha_bar is None:
        alpha_bar = coupling * nu
    alpha = base.shock_location
    transform = make_transform(alpha, alpha + alpha_bar)

    left, left_slope = _perturbed_branch(base.left_branch, base.left_derivative, transform, nu)
    right, right_slope = _perturbed_branch(base.right_branch, base.right_derivative, transform, nu)
    approximation = PiecewiseSolution(
        model=base.model,
        left_branch=left,
        right_branch=right,
        left_derivative=left_slope,
        right_derivative=right_slope,
        shock_location=transform.beta,
        label=f"v(nu={nu:g})",
    )
    return PerturbationFamily(base, float(nu), float(alpha_bar), transform, approximation)


@dataclass(frozen=True)
class ClosenessThresholds:
    nu: float
    xi_derivative: float
    residual: float
    xi_shift: float = np.inf
    pointwise: float = np.inf


@dataclass(frozen=True)
class ClosenessReport:
    nu_measured: float
    xi_derivative_deviation: float
    residual_order: float
    xi_shift: float
    pointwise_gap: float
    xi_second_derivative: float
    shift_ok: bool
    pointwise_ok: bool
    passes: bool


def probe_grid(points: int, exclude=(), window: float = SHOCK_WINDOW) -> np.ndarray:
    x = np.linspace(0.0, 1.0, points)
    keep = np.ones_like(x, dtype=bool)
    for center in exclude:
        keep &= np.abs(x - center) > window
    return x[keep]


def check_closeness(
    w: PiecewiseSolution,
    v: PiecewiseSolution,
    transform: CoordinateTransform,
    thresholds: ClosenessThresholds,
    probe_points: int = 10_000,
    delta: float = 1e-6,
) -> ClosenessReport:
    """Measure how closely v approximates w in the sense of a moved-shock approximation."""
    if abs(transform.alpha - w.shock_location) > 1e-14 or abs(transform.beta - v.shock_location) > 1e-14:
        raise ShockDataError(
            f"transform endpoints ({transform.alpha}, {transform.beta}) do not match "
            f"shock locations ({w.shock_location}, {v.shock_location})"
        )
    alpha, beta = w.shock_location, v.shock_location

    x = probe_grid(probe_points, exclude=(alpha,))
    left = x < alpha
    gap = np.concatenate([
        w.left_branch(x[left]) - v.left_branch(transform.xi1(x[left])),
        w.right_branch(x[~left]) - v.right_branch(transform.xi2(x[~left])),
    ])
    nu_measured = float(np.max(np.abs(gap)))

    full = np.linspace(0.0, 1.0, probe_points)
    xi_dev = float(np.max(np.abs(transform.derivative(full) - 1.0)))
    xi_shift = float(np.max(np.abs(transform(full) - full)))

    y = probe_grid(probe_points, exclude=(beta,))
    residual_order = float(np.max(np.abs(v.branch_residual(y))))

    lo, hi = min(alpha, beta) - delta, max(alpha, beta) + delta
    outside = full[(full < lo) | (full > hi)]
    pointwise = float(np.max(np.abs(v.evaluate(outside) - w.evaluate(outside))))

    shift_ok = xi_shift <= thresholds.xi_shift
    pointwise_ok = pointwise <= thresholds.pointwise
    passes = (
        nu_measured <= thresholds.nu
        and xi_dev <= thresholds.xi_derivative
        and residual_order <= thresholds.residual
    )
    return ClosenessReport(
        nu_measured=nu_measured,
        xi_derivative_deviation=xi_dev,
        residual_order=residual_order,
        xi_shift=xi_shift,
        pointwise_gap=pointwise,
        xi_second_derivative=float(abs(2.0 * transform.b)),
        shift_ok=bool(shift_ok),
        pointwise_ok=bool(pointwise_ok),
        passes=bool(passes),
    )
