from typing import Any, Dict, List
import logging
import math

import numpy as np

from shockadjoint.analysis.error_analysis import (
    ErrorBudget,
    fit_convergence_rate,
    flux_jump_linearization_defect,
    functional_linearization_defect,
    internal_term,
    verify_error_representation,
)
from shockadjoint.core.errors import InsufficientDataError
from shockadjoint.models.reference_solutions import generate_perturbation, reference_solution_for
from shockadjoint.solvers.adjoint_solver import offset_adjoint_anchor, scalar_inviscid_adjoint_oracle
from shockadjoint.stages.base_stage import BaseStage
from shockadjoint.stages.solve_stage import ensure_adjoint_solutions

logger = logging.getLogger(__name__)

BUDGET_COLUMNS = [
    "nu", "alpha_bar", "j_approx", "j_exact", "modified_approx", "modified_exact",
    "residual_term", "shock_pairing", "internal_term", "defect", "defect_over_nu",
    "defect_over_nu2", "mu", "effectivity",
]
OFFSET_COLUMNS = ["nu", "alpha_bar", "internal_term", "defect_without_internal", "defect_over_nu", "expected_plateau"]
DEFECT_DECAY_WINDOW = 5


class ErrorRepresentationStage(BaseStage):
    """Error budget of perturbed exact solutions over the nu sweep."""

    name = "error-representation"

    async def _adjoint(self, reference, internal_value: float):
        if self.model.dimension == 1:
            anchor = offset_adjoint_anchor(reference, internal_value)[0]
            return scalar_inviscid_adjoint_oracle(self.model, reference, (reference.shock_location, anchor))
        # No inviscid oracle for systems: use the viscous adjoint at the smallest viscosity.
        adjoints = await ensure_adjoint_solutions(self.context)
        if not adjoints:
            raise InsufficientDataError("no converged viscous adjoint to weight the residual")
        return adjoints[-1]

    def _budget_row(self, budget: ErrorBudget, fam) -> Dict[str, Any]:
        row = budget.as_row()
        row["flux_jump_defect"] = float(np.max(np.abs(flux_jump_linearization_defect(fam))))
        row["functional_linearization_defect"] = functional_linearization_defect(fam)
        return row

    async def run(self) -> Dict[str, Any]:
        reference = reference_solution_for(self.model)
        p = self.config.perturbation
        nu_list = p.resolved_nu_list()
        families = [generate_perturbation(reference, nu, coupling=p.coupling) for nu in nu_list]
        z = await self._adjoint(reference, 0.0)

        def budget_for(fam):
            budget = verify_error_representation(reference, fam, z, self.model, probe_points=p.probe_points)
            return self._budget_row(budget, fam)

        rows = await self.context.gather_ordered(budget_for, families)
        header = BUDGET_COLUMNS + ["flux_jump_defect", "functional_linearization_defect"]
        self.context.writer.write_csv("budget.csv", header, [[r[c] for c in header] for r in rows])

        offset_rows: List[Dict[str, Any]] = []
        if self.model.dimension == 1:
            z_offset = await self._adjoint(reference, p.internal_offset)
            omitted = internal_term(z_offset, reference, self.model)

            def offset_budget(fam):
                budget = verify_error_representation(
                    reference, fam, z_offset, self.model, include_internal=False, probe_points=p.probe_points
                )
                return {
                    "nu": budget.nu,
                    "alpha_bar": budget.alpha_bar,
                    "internal_term": omitted,
                    "defect_without_internal": budget.defect,
                    "defect_over_nu": budget.defect_over_nu,
                    "expected_plateau": p.coupling * omitted,
                }

            offset_rows = await self.context.gather_ordered(offset_budget, families)
            self.context.writer.write_csv(
                "budget_offset.csv", OFFSET_COLUMNS, [[r[c] for c in OFFSET_COLUMNS] for r in offset_rows]
            )

        fit = None
        if len(rows) >= 3:
            fit = fit_convergence_rate([(r["nu"], r["defect"]) for r in rows])
        self.context.writer.write_csv(
            "budget_fit.csv",
            ["quantity", "slope", "intercept", "r2"],
            [["defect", fit.slope, fit.intercept, fit.r2] if fit else ["defect", "n/a", "n/a", "n/a"]],
        )

        self.check_acceptance(self._acceptance(rows, offset_rows))
        smallest = rows[-1]
        logger.info(f"effectivity at nu={smallest['nu']:g}: {smallest['effectivity']:.4f}")
        return {
            "effectivity": smallest["effectivity"],
            "defect_over_nu": [r["defect_over_nu"] for r in rows],
            "defect_slope": fit.slope if fit else None,
            "plateau": offset_rows[-1]["defect_over_nu"] if offset_rows else None,
        }

    def _acceptance(self, rows, offset_rows) -> List[str]:
        # Thresholds apply to the scalar benchmark, where the oracle adjoint is exact.
        if self.model.dimension != 1:
            return []
        a = self.config.acceptance
        failures = []
        ratios = [abs(r["defect_over_nu"]) for r in rows[-(DEFECT_DECAY_WINDOW + 1):]]
        for big, small in zip(ratios, ratios[1:]):
            if small * a.defect_decay_factor > big:
                failures.append(f"defect/nu decays by {big / small:.2f} < {a.defect_decay_factor}")
                break
        effectivity = rows[-1]["effectivity"]
        if math.isnan(effectivity) or not (a.effectivity_min <= effectivity <= a.effectivity_max):
            failures.append(f"effectivity {effectivity:.4f} outside [{a.effectivity_min}, {a.effectivity_max}]")
        if offset_rows:
            last = offset_rows[-1]
            expected = last["expected_plateau"]
            if abs(last["defect_over_nu"] - expected) > a.plateau_tolerance * abs(expected):
                failures.append(f"defect/nu plateau {last['defect_over_nu']:.4f} differs from {expected:.4f}")
        return failures
