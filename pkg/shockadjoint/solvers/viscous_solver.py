"""
Viscous primal solver for f(w)_x + S(x, w) = eps w_xx on a uniform grid.

Second-order central differences, Dirichlet rows at both ends, damped Newton
with the block-tridiagonal Jacobian solved by banded elimination.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence
import hashlib
import logging
import math

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from shockadjoint.core.errors import (
    DomainError,
    NoInteriorLayerError,
    ShockAdjointError,
    SingularSystemError,
    SolverDivergenceError,
    TransitionRegionError,
)
from shockadjoint.models.balance_models import ModelSpec
from shockadjoint.models.reference_solutions import PiecewiseSolution, reference_solution_for

logger = logging.getLogger(__name__)

MIN_CELLS = 16
RESOLUTION_RATIO = 5.0


@dataclass(frozen=True, eq=False)
class Grid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < MIN_CELLS + 1:
            raise ShockAdjointError(f"grid needs at least {MIN_CELLS} cells, got {len(nodes) - 1}")
        spacing = np.diff(nodes)
        if np.any(spacing <= 0.0):
            raise ShockAdjointError("grid nodes must be strictly increasing")
        if np.max(np.abs(spacing - spacing.mean())) > 1e-12 * spacing.mean() + 1e-15:
            raise ShockAdjointError("grid spacing must be uniform")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, cells: int) -> "Grid":
        return cls(np.linspace(0.0, 1.0, cells + 1))

    @property
    def cells(self) -> int:
        return len(self.nodes) - 1

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    def same_as(self, other: "Grid") -> bool:
        return self.cells == other.cells and np.array_equal(self.nodes, other.nodes)


@dataclass(frozen=True)
class GridPolicy:
    """h = eps / kappa, with a cap on the node count."""

    kappa: float = 8.0
    max_nodes: int = 200_000

    def grid_for(self, epsilon: float) -> Grid:
        cells = max(MIN_CELLS, int(math.ceil(self.kappa / epsilon - 1e-9)))
        if cells + 1 > self.max_nodes:
            logger.warning(f"eps={epsilon:g} needs {cells + 1} nodes; capped at {self.max_nodes}")
            cells = self.max_nodes - 1
        return Grid.uniform(cells)


@dataclass(frozen=True)
class NewtonSettings:
    tolerance: float = 1e-10
    max_iterations: int = 50
    max_halvings: int = 20


@dataclass(frozen=True, eq=False)
class FieldSolution:
    grid: Grid
    values: np.ndarray
    epsilon: float
    converged: bool
    newton_iterations: int
    final_residual_norm: float
    uid: str = field(default="")

    def __post_init__(self):
        if not self.uid:
            digest = hashlib.sha256(np.ascontiguousarray(self.values).tobytes())
            digest.update(repr(self.epsilon).encode())
            object.__setattr__(self, "uid", digest.hexdigest()[:16])

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def gradient(self) -> np.ndarray:
        return np.gradient(self.values, self.grid.h, axis=0)

    def interpolate(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.stack([np.interp(x, self.grid.nodes, self.values[:, k]) for k in range(self.dimension)], axis=-1)


@dataclass(frozen=True)
class TransitionRegion:
    alpha_minus: float
    alpha_plus: float
    alpha_hat: float
    max_gradient: float
    index_minus: int
    index_hat: int
    index_plus: int
    theta: float

    @property
    def width(self) -> float:
        return self.alpha_plus - self.alpha_minus


# ---------------------------------------------------------------------------
# Banded block-tridiagonal systems
# ---------------------------------------------------------------------------

def assemble_banded(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Pack node blocks into LAPACK band storage.

    lower[i] couples row node i to node i-1, upper[i] to node i+1; lower[0]
    and upper[-1] are ignored. Bandwidth is 2d-1 on both sides.
    """
    n_nodes, d, _ = diag.shape
    band = 2 * d - 1
    ab = np.zeros((2 * band + 1, n_nodes * d))
    k, l = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    nodes = np.arange(n_nodes)
    for offset, blocks, rows_at in ((-1, lower, nodes[1:]), (0, diag, nodes), (1, upper, nodes[:-1])):
        i = rows_at[:, None, None]
        rows = i * d + k
        cols = (i + offset) * d + l
        ab[band + rows - cols, cols] = blocks[rows_at]
    return ab


def block_matvec(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray, z: np.ndarray) -> np.ndarray:
    out = np.einsum("nij,nj->ni", diag, z)
    out[1:] += np.einsum("nij,nj->ni", lower[1:], z[:-1])
    out[:-1] += np.einsum("nij,nj->ni", upper[:-1], z[1:])
    return out


def solve_block_tridiagonal(lower, diag, upper, rhs) -> np.ndarray:
    n_nodes, d, _ = diag.shape
    band = 2 * d - 1
    ab = assemble_banded(lower, diag, upper)
    main = np.abs(ab[band])
    pivot_ratio = float(main.min() / main.max()) if main.max() > 0 else 0.0
    try:
        solution = solve_banded((band, band), ab, rhs.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"banded solve failed: {exc}", pivot_ratio=pivot_ratio) from exc
    if not np.all(np.isfinite(solution)):
        raise SingularSystemError("banded solve produced non-finite values", pivot_ratio=pivot_ratio)
    return solution.reshape(n_nodes, d)


# ---------------------------------------------------------------------------
# Discrete primal operator
# ---------------------------------------------------------------------------

def boundary_states(model: ModelSpec):
    """Dirichlet data: the exact inviscid solution at x = 0 and x = 1."""
    reference = reference_solution_for(model)
    ends = reference.evaluate(np.array([0.0, 1.0]))
    return ends[0], ends[1]


def discrete_residual(model: ModelSpec, grid: Grid, w: np.ndarray, epsilon: float, left, right) -> np.ndarray:
    h = grid.h
    x = grid.nodes
    f = model.flux(w)
    res = np.empty_like(w)
    res[1:-1] = (
        (f[2:] - f[:-2]) / (2.0 * h)
        + model.source(x[1:-1], w[1:-1])
        - epsilon * (w[2:] - 2.0 * w[1:-1] + w[:-2]) / (h * h)
    )
    res[0] = w[0] - left
    res[-1] = w[-1] - right
    return res


def linearized_blocks(model: ModelSpec, grid: Grid, w: np.ndarray, epsilon: float):
    """Jacobian blocks of the discrete residual at w (Dirichlet rows are identity)."""
    h = grid.h
    n_nodes, d = w.shape
    eye = np.eye(d)
    fj = model.flux_jacobian(w)
    sj = model.source_jacobian(grid.nodes, w)
    diffusion = epsilon / (h * h)

    lower = np.zeros((n_nodes, d, d))
    diag = np.zeros((n_nodes, d, d))
    upper = np.zeros((n_nodes, d, d))
    lower[1:-1] = -fj[:-2] / (2.0 * h) - diffusion * eye
    diag[1:-1] = sj[1:-1] + 2.0 * diffusion * eye
    upper[1:-1] = fj[2:] / (2.0 * h) - diffusion * eye
    diag[0] = eye
    diag[-1] = eye
    return lower, diag, upper


def _frozen_branches(reference: PiecewiseSolution, x: np.ndarray):
    """Both inviscid branches on x, each frozen at its shock trace past alpha."""
    alpha = reference.shock_location
    left_side = x < alpha
    from_left = np.tile(reference.w_minus, (len(x), 1))
    from_right = np.tile(reference.w_plus, (len(x), 1))
    if np.any(left_side):
        from_left[left_side] = reference.left_branch(x[left_side])
    if np.any(~left_side):
        from_right[~left_side] = reference.right_branch(x[~left_side])
    return from_left, from_right


def _outer_state(reference: PiecewiseSolution, x: np.ndarray, centre: float) -> np.ndarray:
    """Inviscid outer solution with its discontinuity moved to centre."""
    from_left, from_right = _frozen_branches(reference, x)
    return np.where((x < centre)[:, None], from_left, from_right)


def smoothed_inviscid_guess(reference: PiecewiseSolution, grid: Grid, epsilon: float) -> np.ndarray:
    """Branches frozen at their shock traces beyond alpha, blended by tanh over width 5 eps."""
    x = grid.nodes
    from_left, from_right = _frozen_branches(reference, x)
    blend = 0.5 * (1.0 + np.tanh((x - reference.shock_location) / (5.0 * epsilon)))[:, None]
    return (1.0 - blend) * from_left + blend * from_right


def _max_norm(values: np.ndarray) -> float:
    return float(np.max(np.abs(values)))


def solve_viscous_primal(
    model: ModelSpec,
    grid: Grid,
    epsilon: float,
    init: Optional[FieldSolution] = None,
    settings: NewtonSettings = NewtonSettings(),
) -> FieldSolution:
    """Damped Newton solve of the viscous balance law; non-convergence is flagged, not raised."""
    if epsilon <= 0.0:
        raise ShockAdjointError(f"viscosity must be positive, got {epsilon}")
    if grid.h > epsilon / RESOLUTION_RATIO:
        logger.warning(f"layer under-resolved: h={grid.h:.3e} > eps/{RESOLUTION_RATIO:g}={epsilon / RESOLUTION_RATIO:.3e}")

    left, right = boundary_states(model)
    if init is None:
        w = smoothed_inviscid_guess(reference_solution_for(model), grid, epsilon)
    else:
        if not init.grid.same_as(grid):
            raise ShockAdjointError("initial guess lives on a different grid")
        w = np.array(init.values, dtype=float)
    w[0], w[-1] = left, right

    res = discrete_residual(model, grid, w, epsilon, left, right)
    norm = _max_norm(res)
    iterations = 0
    while norm >= settings.tolerance and iterations < settings.max_iterations:
        step = solve_block_tridiagonal(*linearized_blocks(model, grid, w, epsilon), -res)
        damping = 1.0
        accepted = False
        for _ in range(settings.max_halvings + 1):
            trial = w + damping * step
            try:
                trial_res = discrete_residual(model, grid, trial, epsilon, left, right)
                trial_norm = _max_norm(trial_res)
            except DomainError:
                trial_norm = np.inf
            if trial_norm < norm or trial_norm < settings.tolerance:
                accepted = True
                break
            damping *= 0.5
        iterations += 1
        if not accepted:
            logger.warning(f"eps={epsilon:g}: line search stalled at residual {norm:.3e}")
            break
        w, res, norm = trial, trial_res, trial_norm
        logger.debug(f"eps={epsilon:g} newton {iterations}: residual {norm:.3e} (damping {damping:g})")

    converged = norm < settings.tolerance
    if converged:
        logger.info(f"eps={epsilon:g}: converged in {iterations} Newton iterations, residual {norm:.2e}")
    else:
        logger.warning(f"eps={epsilon:g}: Newton did not converge, residual {norm:.3e} after {iterations} iterations")
    return FieldSolution(grid, w, float(epsilon), bool(converged), iterations, norm)


def continuation_sweep(
    model: ModelSpec,
    grid_policy: GridPolicy,
    eps_list: Sequence[float],
    settings: NewtonSettings = NewtonSettings(),
    on_solution: Optional[Callable[[FieldSolution], None]] = None,
) -> List[FieldSolution]:
    """Solve along a decreasing viscosity list, warm-starting each solve from the last.

    The warm start is the previous solution with its shock layer recentred and
    thinned to the new viscosity, see rescaled_warm_start.
    """
    eps_list = list(eps_list)
    if not eps_list or any(e <= 0.0 for e in eps_list) or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ShockAdjointError("eps_list must be nonempty, positive and strictly decreasing")

    reference = reference_solution_for(model)
    solutions: List[FieldSolution] = []
    for epsilon in eps_list:
        grid = grid_policy.grid_for(epsilon)
        init = None
        if solutions:
            warm = rescaled_warm_start(solutions[-1], grid, epsilon, reference)
            init = FieldSolution(grid, warm, epsilon, False, 0, np.inf)
        sol = solve_viscous_primal(model, grid, epsilon, init=init, settings=settings)
        if not sol.converged:
            if not solutions:
                raise SolverDivergenceError(
                    f"first continuation solve (eps={epsilon:g}) diverged, residual {sol.final_residual_norm:.3e}"
                )
            logger.warning(
                f"continuation stopped at eps={epsilon:g}; keeping {len(solutions)} converged solutions"
            )
            break
        solutions.append(sol)
        if on_solution is not None:
            on_solution(sol)
    return solutions


# ---------------------------------------------------------------------------
# Layer diagnostics
# ---------------------------------------------------------------------------

# Peak half-widths.
REGION_WINDOW = 25.0
WARM_START_SUPPORT = 4.0

QUADRATURE_TOLERANCE = 1e-10


def _layer_gradient(sol: FieldSolution) -> np.ndarray:
    return np.abs(np.gradient(sol.values[:, 0], sol.grid.h))


def locate_layer_peak(sol: FieldSolution, near: Optional[float] = None) -> int:
    """Node of maximal first-component |w_x|.

    With near given the search is restricted to |x - near| <= min(near, 1 - near) / 2,
    which keeps it away from boundary layers at either end.
    """
    g = _layer_gradient(sol)
    x = sol.grid.nodes
    lo, hi = 0, len(g) - 1
    if near is not None:
        radius = 0.5 * min(near - x[0], x[-1] - near)
        if radius <= 0.0:
            raise ShockAdjointError(f"layer search centre {near} outside the domain")
        lo = int(np.searchsorted(x, near - radius))
        hi = int(np.searchsorted(x, near + radius, side="right")) - 1
    i_hat = lo + int(np.argmax(g[lo:hi + 1]))
    if i_hat in (0, len(g) - 1):
        raise NoInteriorLayerError(f"gradient maximum at boundary node {i_hat}")
    if i_hat in (lo, hi):
        raise NoInteriorLayerError(f"gradient maximum at the edge of the search window around x={near:g}")
    return i_hat


def peak_half_width(g: np.ndarray, i_hat: int) -> int:
    """Nodes from the peak to where g first drops below half its value, averaged over both sides."""
    half = 0.5 * g[i_hat]
    below = np.flatnonzero(g[:i_hat] < half)
    left = i_hat - below[-1] if len(below) else i_hat
    below = np.flatnonzero(g[i_hat + 1:] < half)
    right = below[0] + 1 if len(below) else len(g) - 1 - i_hat
    return max(1, int(round(0.5 * (left + right))))


def detect_transition_region(sol: FieldSolution, theta: float, near: Optional[float] = None) -> TransitionRegion:
    """Locate the shock layer from the first-component gradient.

    alpha_hat is the node of maximal |w_x| (see locate_layer_peak). The region
    grows outward until |w_x| < theta * max_gradient and the gradient has
    flattened to its background, i.e. it changes by at most theta relative over
    one peak half-width. A region that does not settle within REGION_WINDOW
    half-widths, or before a domain end, raises TransitionRegionError.
    """
    if not 0.0 < theta < 1.0:
        raise ShockAdjointError(f"theta must lie in (0, 1), got {theta}")
    if not sol.converged:
        raise SolverDivergenceError("transition region requested for a non-converged solution")
    g = _layer_gradient(sol)
    last = len(g) - 1
    i_hat = locate_layer_peak(sol, near)
    peak = float(g[i_hat])
    span = peak_half_width(g, i_hat)
    reach = int(REGION_WINDOW * span)

    def grow(outward: int) -> int:
        i = i_hat + outward
        while True:
            j = i + outward * span
            if j < 0 or j > last or abs(i - i_hat) > reach:
                raise TransitionRegionError(
                    f"eps={sol.epsilon:g}, theta={theta:g}: layer gradient does not settle "
                    f"{'left' if outward < 0 else 'right'} of x={sol.grid.nodes[i_hat]:.6g}"
                )
            if g[i] < theta * peak and abs(g[i] - g[j]) <= theta * g[i]:
                return i
            i += outward

    i_minus, i_plus = grow(-1), grow(1)
    x = sol.grid.nodes
    return TransitionRegion(
        alpha_minus=float(x[i_minus]),
        alpha_plus=float(x[i_plus]),
        alpha_hat=float(x[i_hat]),
        max_gradient=peak,
        index_minus=i_minus,
        index_hat=i_hat,
        index_plus=i_plus,
        theta=theta,
    )


def rescaled_warm_start(previous: FieldSolution, grid: Grid, epsilon: float, reference: PiecewiseSolution) -> np.ndarray:
    """Initial guess at epsilon from a solution at a larger viscosity.

    Away from the layer this is the previous solution interpolated onto grid.
    Near it the layer profile (previous minus the inviscid outer state) is
    thinned by eps_prev/eps and recentred at the extrapolated shock position
    alpha + (alpha_hat_prev - alpha) * eps/eps_prev. The stretch fades out over
    WARM_START_SUPPORT peak half-widths of the previous layer.
    """
    x = grid.nodes
    alpha = reference.shock_location
    try:
        i_hat = locate_layer_peak(previous, near=alpha)
    except NoInteriorLayerError as exc:
        logger.debug(f"warm start falls back to interpolation: {exc}")
        return previous.interpolate(x)
    ratio = previous.epsilon / epsilon
    hat_prev = float(previous.grid.nodes[i_hat])
    hat_new = alpha + (hat_prev - alpha) / ratio
    support = WARM_START_SUPPORT * peak_half_width(_layer_gradient(previous), i_hat) * previous.grid.h

    s = x - hat_new
    weight = (1.0 - np.minimum((s / support) ** 2, 1.0)) ** 2
    xi = x + weight * (hat_prev - hat_new + s * (ratio - 1.0))
    if np.any(np.diff(xi) <= 0.0):
        logger.debug(f"warm start stretch {ratio:g} not monotone, falling back to interpolation")
        return previous.interpolate(x)
    layer = previous.interpolate(xi) - _outer_state(reference, xi, hat_prev)
    return _outer_state(reference, x, hat_new) + layer


def _value_at(grid: Grid, q: np.ndarray, position: float) -> np.ndarray:
    index = (position - grid.nodes[0]) / grid.h
    nearest = int(round(index))
    if abs(index - nearest) < 1e-9:
        return q[nearest]
    logger.debug(f"smooth jump endpoint {position} off-grid, interpolating linearly (error O(h^2))")
    return np.array([np.interp(position, grid.nodes, q[:, k]) for k in range(q.shape[1])])


def smooth_jump_forms(sol: FieldSolution, q, region: TransitionRegion):
    """Endpoint difference q(alpha_plus) - q(alpha_minus) and the trapezoid
    integral of the central-difference derivative of q over the region.

    On a uniform grid the two differ by (D2 q(alpha_plus) - D2 q(alpha_minus)) / 4,
    D2 the undivided second difference.
    """
    q = np.asarray(q, dtype=float)
    q2 = q[:, None] if q.ndim == 1 else q
    if len(q2) != len(sol.grid.nodes):
        raise ShockAdjointError("q must be sampled on the solution grid")
    if not (sol.grid.nodes[0] <= region.alpha_minus < region.alpha_plus <= sol.grid.nodes[-1]):
        raise ShockAdjointError("transition region outside the domain")

    grid = sol.grid
    endpoint = _value_at(grid, q2, region.alpha_plus) - _value_at(grid, q2, region.alpha_minus)
    x = grid.nodes
    inside = (x > region.alpha_minus) & (x < region.alpha_plus)
    positions = np.concatenate([[region.alpha_minus], x[inside], [region.alpha_plus]])
    dq = np.gradient(q2, grid.h, axis=0)
    derivative = np.vstack([
        _value_at(grid, dq, region.alpha_minus)[None, :],
        dq[inside],
        _value_at(grid, dq, region.alpha_plus)[None, :],
    ])
    quadrature = trapezoid(derivative, positions, axis=0)
    if q.ndim == 1:
        return endpoint[0], quadrature[0]
    return endpoint, quadrature


def smooth_jump(sol: FieldSolution, q, region: TransitionRegion) -> np.ndarray:
    """Integral of q_x over the transition region, returned as q(alpha_plus) - q(alpha_minus).

    The trapezoid integral of the central-difference derivative is computed
    alongside; a disagreement beyond QUADRATURE_TOLERANCE relative to max|q|
    is logged.
    """
    endpoint, quadrature = smooth_jump_forms(sol, q, region)
    q = np.asarray(q, dtype=float)
    inside = slice(region.index_minus, region.index_plus + 1)
    scale = max(1.0, float(np.max(np.abs(q[inside]))))
    disagreement = float(np.max(np.abs(np.asarray(quadrature) - np.asarray(endpoint))))
    if disagreement > QUADRATURE_TOLERANCE * scale:
        logger.info(
            f"eps={sol.epsilon:g}: smooth jump quadrature differs from the endpoint difference by "
            f"{disagreement:.3e} over [{region.alpha_minus:.6g}, {region.alpha_plus:.6g}]"
        )
    return endpoint


def conservation_diagnostic(model: ModelSpec, sol: FieldSolution) -> np.ndarray:
    """Once-integrated discrete balance law at half nodes; constant for a converged solve.

    (f_i + f_{i+1})/2 - eps (w_{i+1} - w_i)/h + h * sum_{j=1..i} S_j
    """
    h = sol.grid.h
    w = sol.values
    f = model.flux(w)
    s = model.source(sol.grid.nodes, w)
    face_flux = 0.5 * (f[:-1] + f[1:]) - sol.epsilon * np.diff(w, axis=0) / h
    source_sum = np.vstack([np.zeros((1, w.shape[1])), h * np.cumsum(s[1:-1], axis=0)])
    return face_flux + source_sum
