from pathlib import Path
from typing import Any, Dict, List, Optional
import logging

import numpy as np

from shockadjoint.core.errors import ShockAdjointError, SolverDivergenceError
from shockadjoint.exports import field_table, piecewise_table, read_checkpoint
from shockadjoint.models.balance_models import check_model_jacobians
from shockadjoint.models.reference_solutions import reference_solution_for
from shockadjoint.solvers.adjoint_solver import solve_viscous_adjoint
from shockadjoint.solvers.viscous_solver import (
    FieldSolution,
    GridPolicy,
    NewtonSettings,
    conservation_diagnostic,
    continuation_sweep,
    solve_viscous_primal,
)
from shockadjoint.stages.base_stage import BaseStage, RunContext

logger = logging.getLogger(__name__)

JACOBIAN_AUDIT_TOLERANCE = 1e-6
REFERENCE_NAME = "reference.csv"


def primal_name(index: int, suffix: str) -> str:
    return f"primal_{index:02d}.{suffix}"


def adjoint_name(index: int) -> str:
    return f"adjoint_{index:02d}.csv"


def grid_policy_for(context: RunContext) -> GridPolicy:
    v = context.config.viscosity
    return GridPolicy(kappa=v.kappa, max_nodes=v.max_nodes)


def newton_settings_for(context: RunContext) -> NewtonSettings:
    v = context.config.viscosity
    return NewtonSettings(
        tolerance=v.newton_tolerance,
        max_iterations=v.max_newton_iterations,
        max_halvings=v.max_halvings,
    )


def _restart_from_checkpoints(context: RunContext, eps_list: List[float]) -> Optional[List[FieldSolution]]:
    """Re-converge from SAJ1 checkpoints of an earlier solve in the same output directory."""
    policy = grid_policy_for(context)
    settings = newton_settings_for(context)
    solutions = []
    for index, epsilon in enumerate(eps_list):
        path = Path(context.output_dir) / primal_name(index, "saj")
        if not path.exists():
            break
        try:
            stored = read_checkpoint(path)
        except ShockAdjointError as e:
            logger.warning(f"ignoring checkpoint {path}: {e.detail}")
            break
        grid = policy.grid_for(epsilon)
        if stored.epsilon != epsilon or not stored.grid.same_as(grid) or stored.dimension != context.model.dimension:
            break
        sol = solve_viscous_primal(context.model, grid, epsilon, init=stored, settings=settings)
        if not sol.converged:
            break
        solutions.append(sol)
    if len(solutions) == len(eps_list):
        logger.info(f"restarted {len(solutions)} primal solutions from checkpoints")
        return solutions
    return None


async def ensure_primal_solutions(context: RunContext) -> List[FieldSolution]:
    """Primal sweep for this run: cached, restarted from checkpoints, or solved."""
    if context.primal_solutions is not None:
        return context.primal_solutions
    eps_list = context.config.resolved_eps_list()
    solutions = await context.run_in_pool(_restart_from_checkpoints, context, eps_list)
    if solutions is None:
        solutions = await context.run_in_pool(
            continuation_sweep,
            context.model,
            grid_policy_for(context),
            eps_list,
            newton_settings_for(context),
        )
    context.primal_solutions = solutions
    return solutions


async def ensure_adjoint_solutions(context: RunContext) -> list:
    if context.adjoint_solutions is not None:
        return context.adjoint_solutions
    primals = await ensure_primal_solutions(context)
    policy = context.config.resolved_bc_policy()
    context.adjoint_solutions = await context.gather_ordered(
        lambda sol: solve_viscous_adjoint(context.model, sol, policy), primals
    )
    return context.adjoint_solutions


class SolveStage(BaseStage):
    """Viscous primal sweep plus one adjoint per converged viscosity."""

    name = "solve"

    async def run(self) -> Dict[str, Any]:
        rng = np.random.default_rng(self.config.experiment.seed)
        audit = check_model_jacobians(self.model, rng, self.config.experiment.jacobian_samples)
        for key, mismatch in audit.items():
            if mismatch > JACOBIAN_AUDIT_TOLERANCE:
                self.context.warnings.append(f"jacobian audit: {key} mismatch {mismatch:.2e}")

        eps_list = self.config.resolved_eps_list()
        primals = await ensure_primal_solutions(self.context)
        adjoints = await ensure_adjoint_solutions(self.context)

        writer = self.context.writer
        names = self.model.component_names
        writer.write_text(REFERENCE_NAME, piecewise_table(reference_solution_for(self.model)))
        points = []
        for index, (primal, adjoint) in enumerate(zip(primals, adjoints)):
            writer.write_text(primal_name(index, "csv"), field_table(primal, names))
            writer.write_text(adjoint_name(index), field_table(adjoint, [f"z_{n}" for n in names]))
            writer.write_checkpoint(primal_name(index, "saj"), primal)
            flux_integral = conservation_diagnostic(self.model, primal)
            points.append({
                "epsilon": primal.epsilon,
                "nodes": len(primal.grid.nodes),
                "converged": primal.converged,
                "newton_iterations": primal.newton_iterations,
                "residual": primal.final_residual_norm,
                "adjoint_residual": adjoint.residual_norm,
                "conservation_spread": float(np.max(np.ptp(flux_integral, axis=0))),
                "uid": primal.uid,
            })

        summary = {"jacobian_audit": audit, "bc_policy": self.config.resolved_bc_policy(), "sweep": points}
        if len(primals) < len(eps_list):
            raise SolverDivergenceError(
                f"continuation stopped after {len(primals)} of {len(eps_list)} viscosities; "
                f"eps={eps_list[len(primals)]:g} did not converge"
            )
        return summary
