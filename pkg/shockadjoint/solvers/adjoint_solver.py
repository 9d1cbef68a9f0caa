"""
Linear viscous adjoint solve around a frozen primal, and the scalar inviscid
adjoint oracle used to cross-check it away from the layers.
"""
from dataclasses import dataclass
from typing import Literal, Tuple
import logging

import numpy as np
from scipy.integrate import solve_ivp

from shockadjoint.core.errors import OracleError, ShockAdjointError, SolverDivergenceError
from shockadjoint.models.balance_models import ModelSpec
from shockadjoint.models.reference_solutions import PiecewiseSolution
from shockadjoint.solvers.viscous_solver import (
    FieldSolution,
    Grid,
    block_matvec,
    linearized_blocks,
    solve_block_tridiagonal,
)

logger = logging.getLogger(__name__)

BcPolicy = Literal["dirichlet-zero", "linearized-characteristic"]
ADJOINT_RESIDUAL_TOLERANCE = 1e-10
ORACLE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    grid: Grid
    values: np.ndarray
    epsilon: float
    primal_ref: str
    bc_policy: str
    residual_norm: float

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def gradient(self) -> np.ndarray:
        return np.gradient(self.values, self.grid.h, axis=0)

    def interpolate(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.stack([np.interp(x, self.grid.nodes, self.values[:, k]) for k in range(self.dimension)], axis=-1)

    def __call__(self, x) -> np.ndarray:
        return self.interpolate(x)


def adjoint_blocks(model: ModelSpec, primal: FieldSolution):
    """Interior rows of the transposed discrete linearization.

    Row i pairs z_{i-1}, z_i, z_{i+1} with f'(w_i)^T/(2h) - eps/h^2,
    S'(w_i)^T + 2 eps/h^2 and -f'(w_i)^T/(2h) - eps/h^2.
    """
    grid, w, epsilon = primal.grid, primal.values, primal.epsilon
    h = grid.h
    n_nodes, d = w.shape
    eye = np.eye(d)
    fj_t = np.swapaxes(model.flux_jacobian(w), -1, -2)
    sj_t = np.swapaxes(model.source_jacobian(grid.nodes, w), -1, -2)
    diffusion = epsilon / (h * h)

    lower = np.zeros((n_nodes, d, d))
    diag = np.zeros((n_nodes, d, d))
    upper = np.zeros((n_nodes, d, d))
    lower[1:-1] = fj_t[1:-1] / (2.0 * h) - diffusion * eye
    diag[1:-1] = sj_t[1:-1] + 2.0 * diffusion * eye
    upper[1:-1] = -fj_t[1:-1] / (2.0 * h) - diffusion * eye
    rhs = np.zeros((n_nodes, d))
    rhs[1:-1] = model.target_gradient(w[1:-1])
    return lower, diag, upper, rhs


def _characteristic_rows(jacobian: np.ndarray, outgoing_sign: float):
    """Left-eigenvector rows of f'(w_b)^T split into Dirichlet and Neumann sets."""
    eigenvalues, vectors = np.linalg.eig(jacobian.T)
    left = np.real(np.linalg.inv(vectors))
    speeds = np.real(eigenvalues)
    dirichlet = outgoing_sign * speeds > 0.0
    return left, dirichlet


def _apply_boundary_rows(model, primal, bc_policy, lower, diag, upper):
    d = primal.dimension
    if bc_policy == "dirichlet-zero":
        diag[0] = np.eye(d)
        diag[-1] = np.eye(d)
        return
    if bc_policy != "linearized-characteristic":
        raise ShockAdjointError(f"unknown adjoint bc_policy {bc_policy!r}")

    ends = model.flux_jacobian(primal.values[[0, -1]])
    # Left boundary: zero on characteristics with negative speed, first-order Neumann otherwise.
    left, dirichlet = _characteristic_rows(ends[0], outgoing_sign=-1.0)
    diag[0] = left
    upper[0] = np.where(dirichlet[:, None], 0.0, -left)
    right, dirichlet = _characteristic_rows(ends[1], outgoing_sign=1.0)
    diag[-1] = right
    lower[-1] = np.where(dirichlet[:, None], 0.0, -right)
    logger.debug(f"characteristic adjoint rows: {int(dirichlet.sum())} Dirichlet conditions at x=1")


def solve_viscous_adjoint(model: ModelSpec, primal: FieldSolution, bc_policy: BcPolicy = "dirichlet-zero") -> AdjointSolution:
    if not primal.converged:
        raise SolverDivergenceError(f"adjoint requested for a non-converged primal (eps={primal.epsilon:g})")
    lower, diag, upper, rhs = adjoint_blocks(model, primal)
    _apply_boundary_rows(model, primal, bc_policy, lower, diag, upper)

    z = solve_block_tridiagonal(lower, diag, upper, rhs)
    if bc_policy == "dirichlet-zero":
        # Banded elimination leaves round-off in the identity rows.
        z[0] = 0.0
        z[-1] = 0.0
    residual = block_matvec(lower, diag, upper, z) - rhs
    norm = float(np.max(np.abs(residual)))
    scale = max(1.0, float(np.max(np.abs(diag))) * float(np.max(np.abs(z))))
    if norm > ADJOINT_RESIDUAL_TOLERANCE * scale:
        logger.warning(f"eps={primal.epsilon:g}: adjoint residual {norm:.3e} above tolerance")
    logger.info(f"eps={primal.epsilon:g}: adjoint solved ({bc_policy}), residual {norm:.2e}")
    return AdjointSolution(primal.grid, z, primal.epsilon, primal.uid, bc_policy, norm)


def linearized_primal_apply(model: ModelSpec, primal: FieldSolution, delta: np.ndarray) -> np.ndarray:
    """L_h delta on interior nodes, zero on the boundary rows."""
    lower, diag, upper = linearized_blocks(model, primal.grid, primal.values, primal.epsilon)
    out = block_matvec(lower, diag, upper, delta)
    out[0] = 0.0
    out[-1] = 0.0
    return out


# ---------------------------------------------------------------------------
# Scalar inviscid adjoint oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InviscidAdjoint:
    """Branch-wise ODE solution, continuous at the shock."""

    shock_location: float
    anchor: Tuple[float, float]
    left_segments: tuple
    right_segments: tuple
    shock_value: float

    @property
    def breakpoints(self) -> Tuple[float, ...]:
        return (self.shock_location,)

    @staticmethod
    def _evaluate(segments, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for lo, hi, dense in segments:
            mask = (x >= lo) & (x <= hi)
            if np.any(mask):
                out[mask] = dense(x[mask])[0]
        return out

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        left = x < self.shock_location
        out[left] = self._evaluate(self.left_segments, x[left])
        out[~left] = self._evaluate(self.right_segments, x[~left])
        out[x == self.shock_location] = self.shock_value
        return out[:, None]


def _check_branch_sign(model, branch, lo, hi, label):
    samples = model.flux_jacobian(branch(np.linspace(lo, hi, 1001)))[:, 0, 0]
    if np.any(samples == 0.0) or samples.min() * samples.max() < 0.0:
        raise OracleError(f"characteristic speed vanishes on the {label} branch over [{lo:g}, {hi:g}]")


def _integrate(model, branch, start: float, value: float, stop: float):
    def rhs(x, z):
        state = branch(np.array([x]))
        speed = model.flux_jacobian(state)[0, 0, 0]
        coupling = model.source_jacobian(np.array([x]), state)[0, 0, 0]
        forcing = model.target_gradient(state)[0, 0]
        return [(coupling * z[0] - forcing) / speed]

    lo, hi = sorted((start, stop))
    if hi - lo <= 0.0:
        return None, value
    sol = solve_ivp(rhs, (start, stop), [value], method="DOP853", rtol=ORACLE_TOLERANCE,
                    atol=ORACLE_TOLERANCE, dense_output=True)
    if not sol.success:
        raise OracleError(f"oracle integration failed: {sol.message}")
    return (lo, hi, sol.sol), float(sol.y[0, -1])


def scalar_inviscid_adjoint_oracle(model: ModelSpec, w: PiecewiseSolution, anchor: Tuple[float, float]) -> InviscidAdjoint:
    """Integrate -f'(w) z_x + S'(w) z = p'(w) outward from an anchor, branch by branch.

    The anchored branch is integrated to both of its ends; the other branch
    starts from the value reached at the shock.
    """
    if model.dimension != 1:
        raise ShockAdjointError("the inviscid adjoint oracle is scalar only")
    position, value = float(anchor[0]), float(anchor[1])
    if not 0.0 <= position <= 1.0:
        raise OracleError(f"anchor position {position} outside [0, 1]")
    alpha = w.shock_location
    _check_branch_sign(model, w.left_branch, 0.0, alpha, "left")
    _check_branch_sign(model, w.right_branch, alpha, 1.0, "right")

    if position < alpha:
        to_start, _ = _integrate(model, w.left_branch, position, value, 0.0)
        to_shock, shock_value = _integrate(model, w.left_branch, position, value, alpha)
        left = tuple(s for s in (to_start, to_shock) if s is not None)
        segment, _ = _integrate(model, w.right_branch, alpha, shock_value, 1.0)
        right = (segment,)
    else:
        if position == alpha:
            shock_value = value
            to_end, _ = _integrate(model, w.right_branch, alpha, value, 1.0)
            right = (to_end,)
        else:
            to_end, _ = _integrate(model, w.right_branch, position, value, 1.0)
            to_shock, shock_value = _integrate(model, w.right_branch, position, value, alpha)
            right = tuple(s for s in (to_shock, to_end) if s is not None)
        segment, _ = _integrate(model, w.left_branch, alpha, shock_value, 0.0)
        left = (segment,)
    logger.debug(f"oracle anchored at x={position:g}: z(alpha)={shock_value:.12g}")
    return InviscidAdjoint(alpha, (position, value), left, right, shock_value)


def offset_adjoint_anchor(w: PiecewiseSolution, internal_value: float = 0.0) -> np.ndarray:
    """Minimal-norm z(alpha) giving -z^T [f(w)_x] - [p(w)] = internal_value.

    internal_value = 0 is the interior boundary condition itself.
    """
    flux_slope_jump = w.flux_derivative_jump()
    norm2 = float(flux_slope_jump @ flux_slope_jump)
    if norm2 == 0.0:
        raise ShockAdjointError("[f(w)_x] vanishes; the interior condition does not fix z(alpha)")
    return -(internal_value + w.target_jump()) * flux_slope_jump / norm2


def oracle_deviation(adjoint: AdjointSolution, oracle, window: Tuple[float, float] = (0.05, 0.3)) -> float:
    """Max |z_eps - z| over grid nodes in window."""
    x = adjoint.grid.nodes
    mask = (x >= window[0]) & (x <= window[1])
    if not np.any(mask):
        raise ShockAdjointError(f"no grid nodes in window {window}")
    return float(np.max(np.abs(adjoint.values[mask] - oracle(x[mask]))))


def adjoint_consistency_gap(model: ModelSpec, primal: FieldSolution, adjoint: AdjointSolution, delta: np.ndarray) -> float:
    """|<p'(w), dw>_h - <z, L_h dw>_h| for a perturbation vanishing at the boundary nodes."""
    delta = np.asarray(delta, dtype=float)
    if np.any(delta[0] != 0.0) or np.any(delta[-1] != 0.0):
        raise ShockAdjointError("perturbation must vanish at the boundary nodes")
    h = primal.grid.h
    forward = h * np.sum(model.target_gradient(primal.values[1:-1]) * delta[1:-1])
    transposed = h * np.sum(adjoint.values[1:-1] * linearized_primal_apply(model, primal, delta)[1:-1])
    return float(abs(forward - transposed))
