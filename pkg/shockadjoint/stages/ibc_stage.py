from dataclasses import asdict
from typing import Any, Dict, List, Optional, Tuple
import logging

import numpy as np

from shockadjoint.analysis.error_analysis import (
    ConvergenceFit,
    IbcReport,
    euler_z2_gap,
    fit_convergence_rate,
    viscous_ibc_residual,
)
from shockadjoint.core.errors import InsufficientDataError, NoInteriorLayerError, TransitionRegionError
from shockadjoint.models.reference_solutions import reference_solution_for
from shockadjoint.solvers.adjoint_solver import offset_adjoint_anchor, oracle_deviation, scalar_inviscid_adjoint_oracle
from shockadjoint.solvers.viscous_solver import detect_transition_region, locate_layer_peak
from shockadjoint.stages.base_stage import BaseStage
from shockadjoint.stages.solve_stage import ensure_adjoint_solutions

logger = logging.getLogger(__name__)

MIN_SWEEP_POINTS = 3
TREND_WINDOW = 4
ADJOINT_SLOPE_RATIO = 3.0


def theta_column(theta: float) -> str:
    return f"residual_theta_{theta:g}"


def decreasing(values: List[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def fit_or_none(quantity: str, pairs) -> Optional[ConvergenceFit]:
    try:
        return fit_convergence_rate(pairs)
    except InsufficientDataError as exc:
        logger.warning(f"no fit for {quantity}: {exc}")
        return None


class IbcStage(BaseStage):
    """Viscous interior-boundary-condition residual along the viscosity sweep.

    Sweep points whose transition region cannot be delimited are written as
    n/a and left out of the fits.
    """

    name = "check-ibc"

    def _thetas(self) -> List[float]:
        v = self.config.viscosity
        return sorted(set(v.theta_sensitivity) | {v.theta})

    def _near(self) -> float:
        return reference_solution_for(self.model).shock_location

    def _evaluate(self, job: Tuple[int, float]) -> Optional[IbcReport]:
        index, theta = job
        primal = self.context.primal_solutions[index]
        adjoint = self.context.adjoint_solutions[index]
        try:
            region = detect_transition_region(primal, theta, near=self._near())
        except (TransitionRegionError, NoInteriorLayerError) as exc:
            logger.warning(f"excluded from the fits: {exc}")
            return None
        return viscous_ibc_residual(primal, adjoint, region, self.model)

    def _peak(self, index: int) -> Optional[int]:
        try:
            return locate_layer_peak(self.context.primal_solutions[index], near=self._near())
        except NoInteriorLayerError as exc:
            logger.warning(f"eps={self.context.primal_solutions[index].epsilon:g}: {exc}")
            return None

    async def run(self) -> Dict[str, Any]:
        adjoints = await ensure_adjoint_solutions(self.context)
        primals = self.context.primal_solutions
        if len(primals) < MIN_SWEEP_POINTS:
            raise InsufficientDataError(
                f"check-ibc needs at least {MIN_SWEEP_POINTS} converged sweep points, got {len(primals)}"
            )

        thetas = self._thetas()
        main_theta = self.config.viscosity.theta
        jobs = [(index, theta) for index in range(len(primals)) for theta in thetas]
        reports = dict(zip(jobs, await self.context.gather_ordered(self._evaluate, jobs)))

        oracle = None
        if self.model.dimension == 1:
            reference = reference_solution_for(self.model)
            anchor = offset_adjoint_anchor(reference, 0.0)[0]
            oracle = scalar_inviscid_adjoint_oracle(self.model, reference, (reference.shock_location, anchor))

        header = [
            "epsilon", "alpha_hat", "alpha_minus", "alpha_plus", "region_width",
            "viscous_residual", "endpoint_form", "identity_gap", "flux_remainder", "proof_identity_gap", "quadrature_gap",
            "adjoint_slope_max", "eps_max_gradient",
            *[theta_column(t) for t in thetas], "z_alpha_hat", "euler_z2_gap", "oracle_deviation",
        ]
        z_component = 1 if self.model.dimension == 3 else 0
        rows, table = [], []
        for index, (primal, adjoint) in enumerate(zip(primals, adjoints)):
            report = reports[(index, main_theta)]
            i_hat = self._peak(index)
            alpha_hat = float(primal.grid.nodes[i_hat]) if i_hat is not None else None
            gradient = np.abs(primal.gradient()[:, 0])
            entry = {
                "epsilon": primal.epsilon,
                "alpha_hat": alpha_hat,
                "alpha_minus": report.alpha_minus if report else None,
                "alpha_plus": report.alpha_plus if report else None,
                "region_width": report.alpha_plus - report.alpha_minus if report else None,
                "viscous_residual": report.viscous_residual if report else None,
                "endpoint_form": report.endpoint_form if report else None,
                "identity_gap": report.identity_gap if report else None,
                "flux_remainder": report.flux_remainder if report else None,
                "proof_identity_gap": report.proof_identity_gap if report else None,
                "quadrature_gap": report.quadrature_gap if report else None,
                "adjoint_slope_max": report.adjoint_slope_max if report else None,
                "eps_max_gradient": primal.epsilon * float(gradient[i_hat]) if i_hat is not None else None,
                **{
                    theta_column(t): reports[(index, t)].viscous_residual if reports[(index, t)] else None
                    for t in thetas
                },
                "z_alpha_hat": float(adjoint.interpolate(alpha_hat)[0, z_component]) if alpha_hat is not None else None,
                "euler_z2_gap": (
                    euler_z2_gap(adjoint, alpha_hat, self.model.geometry)
                    if self.model.geometry is not None and alpha_hat is not None else None
                ),
                "oracle_deviation": oracle_deviation(adjoint, oracle) if oracle is not None else None,
            }
            table.append(entry)
            rows.append([entry[h] for h in header])
        self.context.writer.write_csv("ibc_sweep.csv", header, rows)

        eps = [e["epsilon"] for e in table]
        quantities = ["viscous_residual", "endpoint_form", "region_width", *[theta_column(t) for t in thetas]]
        if self.model.geometry is not None:
            quantities.append("euler_z2_gap")
        fits = {q: fit_or_none(q, list(zip(eps, [e[q] for e in table]))) for q in quantities}
        self.context.writer.write_csv(
            "fit.csv",
            ["quantity", "slope", "intercept", "r2", "used", "excluded"],
            [
                [q, f.slope, f.intercept, f.r2, f.used, f.excluded] if f else [q, None, None, None, 0, len(table)]
                for q, f in fits.items()
            ],
        )
        main = fits["viscous_residual"]
        if main is not None:
            logger.info(f"viscous IBC residual: slope {main.slope:.3f}, r2 {main.r2:.4f} over {main.used} points")

        self.check_acceptance(self._acceptance(table, fits, thetas))
        return {
            "slope": main.slope if main else None,
            "r2": main.r2 if main else None,
            "fits": {q: asdict(f) if f else None for q, f in fits.items()},
            "points": len(table),
            "excluded": sum(report is None for report in reports.values()),
        }

    def _acceptance(self, table, fits, thetas) -> List[str]:
        a = self.config.acceptance
        failures = []
        identity = [e for e in table if e["proof_identity_gap"] is not None]
        worst = max(identity, key=lambda e: e["proof_identity_gap"], default=None)
        if worst is not None and worst["proof_identity_gap"] > a.proof_identity_max:
            failures.append(
                f"discrete proof identity off by {worst['proof_identity_gap']:.2e} at eps={worst['epsilon']:g}"
            )
        if self.model.geometry is not None:
            geom = self.model.geometry
            tail = [e for e in table if e["euler_z2_gap"] is not None]
            if not tail:
                return ["no sweep point has a located shock layer for the z_2 check"]
            last = tail[-1]
            reference = abs(float(geom.area(last["alpha_hat"]) / geom.area_derivative(last["alpha_hat"])))
            relative = abs(last["euler_z2_gap"]) / reference
            if relative > a.euler_gap_max:
                failures.append(f"z_2 gap {relative:.1%} of A/A' at the smallest eps")
            gaps = [abs(e["euler_z2_gap"]) for e in tail[-TREND_WINDOW:]]
            if not decreasing(gaps):
                failures.append("z_2 gap not decreasing over the last sweep entries")
            return failures

        main = fits["viscous_residual"]
        if main is None:
            failures.append("IBC residual has too few delimited transition regions for a fit")
        elif not (a.slope_min <= main.slope <= a.slope_max) or main.r2 < a.r2_min:
            failures.append(f"IBC residual slope {main.slope:.3f} (r2 {main.r2:.4f}) outside [{a.slope_min}, {a.slope_max}]")

        theta_fits = [fits[theta_column(t)] for t in thetas]
        if any(f is None for f in theta_fits):
            failures.append("theta sensitivity fit missing for at least one theta")
        else:
            theta_slopes = [f.slope for f in theta_fits]
            if max(theta_slopes) - min(theta_slopes) > a.theta_slope_spread:
                failures.append(f"theta slopes spread {max(theta_slopes) - min(theta_slopes):.3f}")

        last = table[-1]
        theta_values = [last[theta_column(t)] for t in thetas]
        if any(v is None for v in theta_values) or last["viscous_residual"] is None:
            failures.append(f"theta residuals incomplete at eps={last['epsilon']:g}")
        else:
            spread = (max(theta_values) - min(theta_values)) / abs(last["viscous_residual"])
            if spread > a.theta_relative_spread:
                failures.append(f"theta residuals differ by {spread:.1%} at eps={last['epsilon']:g}")

        slopes = [e["adjoint_slope_max"] for e in table if e["adjoint_slope_max"] is not None][-TREND_WINDOW:]
        if slopes and max(slopes) > ADJOINT_SLOPE_RATIO * min(slopes):
            failures.append(f"adjoint slope in the transition region varies by {max(slopes) / min(slopes):.2f}x")

        deviations = [e["oracle_deviation"] for e in table[-TREND_WINDOW:]]
        if not decreasing(deviations):
            failures.append("adjoint/oracle deviation not decreasing over the last sweep entries")
        return failures
