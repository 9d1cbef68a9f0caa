"""
Balance-law models f(w)_x + S(x, w) = 0.

All model callables are vectorized: states have shape (..., d), Jacobians
(..., d, d), positions broadcast against the leading state axes.
"""
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Optional, Tuple
import logging

import numpy as np

from shockadjoint.core.errors import DomainError

logger = logging.getLogger(__name__)

ADMISSIBILITY_TOLERANCE = 1e-12

EULER_COMPONENTS = ("rho", "rho_u", "E")


@dataclass(frozen=True)
class EulerParams:
    gamma: float = 1.4
    alpha0: float = 1.0
    alpha1: float = 0.0

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise DomainError(f"gamma must exceed 1, got {self.gamma}")


@dataclass(frozen=True)
class NozzleGeometry:
    """Parabolic nozzle A(x) = 1 + coefficient * (x - throat)^2 on [0, 1]."""

    coefficient: float = 0.8
    throat: float = 0.5

    def __post_init__(self):
        if self.coefficient < 0.0:
            raise DomainError("area coefficient must be nonnegative so that A(x) > 0")

    def area(self, x):
        return 1.0 + self.coefficient * (np.asarray(x, dtype=float) - self.throat) ** 2

    def area_derivative(self, x):
        return 2.0 * self.coefficient * (np.asarray(x, dtype=float) - self.throat)

    def area_second_derivative(self, x):
        return np.full_like(np.asarray(x, dtype=float), 2.0 * self.coefficient)

    @property
    def throat_area(self) -> float:
        return 1.0

    def log_area_ratio(self, x, critical_area: float = 1.0):
        """log(A(x) / A*), accurate near the throat."""
        x = np.asarray(x, dtype=float)
        base = np.log1p(self.coefficient * (x - self.throat) ** 2)
        return base - np.log(critical_area)

    def source_factor(self, x):
        return self.area_derivative(x) / self.area(x)


@dataclass(frozen=True)
class BoundaryData:
    outflow_pressure: Optional[float] = None
    inflow_entropy: Optional[float] = None
    inflow_enthalpy: Optional[float] = None
    left_value: Optional[float] = None
    right_value: Optional[float] = None


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """One balance law: flux, source, target integrand and their derivatives."""

    name: str
    dimension: int
    flux: Callable[[np.ndarray], np.ndarray]
    flux_jacobian: Callable[[np.ndarray], np.ndarray]
    source: Callable[[np.ndarray, np.ndarray], np.ndarray]
    source_jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray]
    target_integrand: Callable[[np.ndarray], np.ndarray]
    target_gradient: Callable[[np.ndarray], np.ndarray]
    boundary: BoundaryData
    admissibility: Callable[[np.ndarray], None]
    geometry: Optional[NozzleGeometry] = None
    params: Optional[EulerParams] = None
    component_names: Tuple[str, ...] = field(default=("w",))

    def check_admissible(self, w) -> None:
        self.admissibility(np.asarray(w, dtype=float))

    def residual(self, x, w, w_x) -> np.ndarray:
        """Pointwise f'(w) w_x + S(x, w) for smooth data."""
        return np.einsum("...ij,...j->...i", self.flux_jacobian(w), w_x) + self.source(x, w)


# ---------------------------------------------------------------------------
# Scalar model: f = w^2/2, S = w, p = w^3/3
# ---------------------------------------------------------------------------

def _scalar_flux(w):
    w = np.asarray(w, dtype=float)
    return 0.5 * w * w


def _scalar_flux_jacobian(w):
    w = np.asarray(w, dtype=float)
    return w[..., None]


def _scalar_source(x, w):
    return np.array(w, dtype=float)


def _scalar_source_jacobian(x, w):
    w = np.asarray(w, dtype=float)
    return np.ones(w.shape + (1,))


def _scalar_target(w):
    w = np.asarray(w, dtype=float)
    return w[..., 0] ** 3 / 3.0


def _scalar_target_gradient(w):
    w = np.asarray(w, dtype=float)
    return w * w


def _scalar_admissible(w):
    if not np.all(np.isfinite(w)):
        raise DomainError("non-finite scalar state", component=0)


def scalar_model() -> ModelSpec:
    """Burgers flux with linear source; exact shocked solution known in closed form."""
    return ModelSpec(
        name="scalar",
        dimension=1,
        flux=_scalar_flux,
        flux_jacobian=_scalar_flux_jacobian,
        source=_scalar_source,
        source_jacobian=_scalar_source_jacobian,
        target_integrand=_scalar_target,
        target_gradient=_scalar_target_gradient,
        boundary=BoundaryData(left_value=1.2, right_value=-1.4),
        admissibility=_scalar_admissible,
    )


# ---------------------------------------------------------------------------
# Quasi-1D Euler
# ---------------------------------------------------------------------------

def _check_density(rho) -> None:
    bad = ~(rho > ADMISSIBILITY_TOLERANCE)
    if np.any(bad):
        worst = float(np.min(np.where(np.isnan(rho), -np.inf, rho)))
        raise DomainError(
            f"nonpositive density in component 0 (rho): min value {worst:.6g}",
            component=0,
        )


def _check_pressure(p) -> None:
    bad = ~(p > ADMISSIBILITY_TOLERANCE)
    if np.any(bad):
        worst = float(np.min(np.where(np.isnan(p), -np.inf, p)))
        raise DomainError(
            f"nonpositive pressure (from component 2, E): min value {worst:.6g}",
            component=2,
        )


def _unpack(w):
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != 3:
        raise DomainError(f"Euler state must have 3 components, got shape {w.shape}")
    rho, m, energy = w[..., 0], w[..., 1], w[..., 2]
    _check_density(rho)
    return rho, m, energy


def euler_pressure(w, params: EulerParams):
    rho, m, energy = _unpack(w)
    return (params.gamma - 1.0) * (energy - 0.5 * m * m / rho)


def euler_state_from_primitive(rho, u, p, params: EulerParams) -> np.ndarray:
    rho, u, p = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (rho, u, p)))
    return np.stack([rho, rho * u, p / (params.gamma - 1.0) + 0.5 * rho * u * u], axis=-1)


def euler_flux(w, params: EulerParams) -> np.ndarray:
    rho, m, energy = _unpack(w)
    u = m / rho
    p = (params.gamma - 1.0) * (energy - 0.5 * m * u)
    return np.stack([m, m * u + p, u * (energy + p)], axis=-1)


def _enthalpy_row(u, energy, p, rho, gamma):
    big_h = (energy + p) / rho
    return np.stack(
        [u * (0.5 * (gamma - 1.0) * u * u - big_h), big_h - (gamma - 1.0) * u * u, gamma * u],
        axis=-1,
    )


def euler_flux_jacobian(w, params: EulerParams) -> np.ndarray:
    rho, m, energy = _unpack(w)
    g = params.gamma
    u = m / rho
    p = (g - 1.0) * (energy - 0.5 * m * u)
    jac = np.zeros(rho.shape + (3, 3))
    jac[..., 0, 1] = 1.0
    jac[..., 1, 0] = 0.5 * (g - 3.0) * u * u
    jac[..., 1, 1] = (3.0 - g) * u
    jac[..., 1, 2] = g - 1.0
    jac[..., 2, :] = _enthalpy_row(u, energy, p, rho, g)
    return jac


def euler_source(x, w, geom: NozzleGeometry, params: EulerParams) -> np.ndarray:
    rho, m, energy = _unpack(w)
    u = m / rho
    p = (params.gamma - 1.0) * (energy - 0.5 * m * u)
    factor = np.asarray(geom.source_factor(x), dtype=float)
    return factor[..., None] * np.stack([m, m * u, u * (energy + p)], axis=-1)


def euler_source_jacobian(x, w, geom: NozzleGeometry, params: EulerParams) -> np.ndarray:
    rho, m, energy = _unpack(w)
    g = params.gamma
    u = m / rho
    p = (g - 1.0) * (energy - 0.5 * m * u)
    jac = np.zeros(rho.shape + (3, 3))
    jac[..., 0, 1] = 1.0
    jac[..., 1, 0] = -u * u
    jac[..., 1, 1] = 2.0 * u
    jac[..., 2, :] = _enthalpy_row(u, energy, p, rho, g)
    factor = np.asarray(geom.source_factor(x), dtype=float)
    return factor[..., None, None] * jac


def euler_pressure_gradient(w, params: EulerParams) -> np.ndarray:
    rho, m, _ = _unpack(w)
    u = m / rho
    gm1 = params.gamma - 1.0
    return np.stack([0.5 * gm1 * u * u, -gm1 * u, np.full_like(u, gm1)], axis=-1)


def euler_entropy_enthalpy(w, params: EulerParams):
    """Entropy s = alpha0 log(p / rho^gamma) + alpha1 and total enthalpy h."""
    rho, m, _ = _unpack(w)
    p = euler_pressure(w, params)
    _check_pressure(p)
    u = m / rho
    g = params.gamma
    s = params.alpha0 * (np.log(p) - g * np.log(rho)) + params.alpha1
    h = g * p / ((g - 1.0) * rho) + 0.5 * u * u
    return s, h


def euler_boundary_residual(w_in, w_out, bd: BoundaryData, params: EulerParams) -> np.ndarray:
    """(s(w_in) - s0, h(w_in) - h0, p(w_out) - p0); zero iff the boundary data hold."""
    s, h = euler_entropy_enthalpy(w_in, params)
    p_out = euler_pressure(w_out, params)
    return np.array([s - bd.inflow_entropy, h - bd.inflow_enthalpy, p_out - bd.outflow_pressure], dtype=float)


def _euler_admissible(w, params: EulerParams):
    _check_pressure(euler_pressure(w, params))


def euler_model(
    params: Optional[EulerParams] = None,
    geometry: Optional[NozzleGeometry] = None,
    boundary: Optional[BoundaryData] = None,
) -> ModelSpec:
    params = params or EulerParams()
    geometry = geometry or NozzleGeometry()
    boundary = boundary or BoundaryData(outflow_pressure=0.77, inflow_entropy=0.0, inflow_enthalpy=3.5)
    if boundary.outflow_pressure is None or boundary.outflow_pressure <= 0.0:
        raise DomainError("outflow pressure p0 must be positive")
    if boundary.inflow_enthalpy is None or boundary.inflow_enthalpy <= 0.0:
        raise DomainError("inflow enthalpy h0 must be positive")

    def target(w):
        return euler_pressure(w, params)

    return ModelSpec(
        name="euler-nozzle",
        dimension=3,
        flux=partial(euler_flux, params=params),
        flux_jacobian=partial(euler_flux_jacobian, params=params),
        source=partial(euler_source, geom=geometry, params=params),
        source_jacobian=partial(euler_source_jacobian, geom=geometry, params=params),
        target_integrand=target,
        target_gradient=partial(euler_pressure_gradient, params=params),
        boundary=boundary,
        admissibility=partial(_euler_admissible, params=params),
        geometry=geometry,
        params=params,
        component_names=EULER_COMPONENTS,
    )


def model_from_config(config) -> ModelSpec:
    """Build the ModelSpec an ExperimentConfig selects."""
    if config.selected_model == "scalar":
        return scalar_model()
    e = config.euler
    return euler_model(
        params=EulerParams(gamma=e.gamma, alpha0=e.alpha0, alpha1=e.alpha1),
        geometry=NozzleGeometry(coefficient=e.area_coefficient, throat=e.throat),
        boundary=BoundaryData(
            outflow_pressure=e.outflow_pressure,
            inflow_entropy=e.inflow_entropy,
            inflow_enthalpy=e.inflow_enthalpy,
        ),
    )


# ---------------------------------------------------------------------------
# Jacobian audit
# ---------------------------------------------------------------------------

def sample_admissible_states(model: ModelSpec, rng: np.random.Generator, count: int):
    """Random admissible states and positions for derivative checks."""
    x = rng.uniform(0.0, 1.0, size=count)
    if model.dimension == 1:
        return x, rng.uniform(-2.0, 2.0, size=(count, 1))
    rho = rng.uniform(0.5, 2.0, size=count)
    u = rng.uniform(-1.0, 1.5, size=count)
    p = rng.uniform(0.3, 2.0, size=count)
    return x, euler_state_from_primitive(rho, u, p, model.params)


def _central_jacobian(func, w, step):
    d = w.shape[-1]
    columns = []
    for j in range(d):
        shift = np.zeros_like(w)
        shift[..., j] = step[..., j]
        columns.append((func(w + shift) - func(w - shift)) / (2.0 * step[..., j : j + 1]))
    return np.stack(columns, axis=-1)


def _relative_mismatch(exact, approx) -> float:
    scale = np.maximum(1.0, np.max(np.abs(exact), axis=tuple(range(1, exact.ndim)), keepdims=True))
    return float(np.max(np.abs(exact - approx) / scale))


def check_model_jacobians(model: ModelSpec, rng: np.random.Generator, count: int = 100) -> Dict[str, float]:
    """Max relative mismatch of f', S', p' against central differences."""
    x, w = sample_admissible_states(model, rng, count)
    step = 1e-6 * np.maximum(1.0, np.abs(w))

    flux_fd = _central_jacobian(model.flux, w, step)
    source_fd = _central_jacobian(lambda s: model.source(x, s), w, step)
    target_fd = _central_jacobian(lambda s: model.target_integrand(s)[..., None], w, step)[..., 0, :]

    report = {
        "flux_jacobian": _relative_mismatch(model.flux_jacobian(w), flux_fd),
        "source_jacobian": _relative_mismatch(model.source_jacobian(x, w), source_fd),
        "target_gradient": _relative_mismatch(model.target_gradient(w), target_fd),
    }
    logger.debug(f"Jacobian audit for {model.name}: {report}")
    return report
