import numpy as np
import pytest

from shockadjoint.core.config import WORKERS_ENV, DATABASE_URL_ENV
from shockadjoint.models.balance_models import euler_model, scalar_model
from shockadjoint.models.reference_solutions import manufactured_scalar_solution, reference_solution_for
from shockadjoint.solvers.adjoint_solver import solve_viscous_adjoint
from shockadjoint.solvers.viscous_solver import GridPolicy, solve_viscous_primal

# Exact values of the manufactured scalar benchmark
SCALAR_SHOCK = 0.4
SCALAR_FUNCTIONAL = (1.2 ** 4 - 0.8 ** 4) / 12.0 - (1.4 ** 4 - 0.8 ** 4) / 12.0
SCALAR_FLUX_SLOPE_JUMP = 1.6
SCALAR_TARGET_JUMP = -1.024 / 3.0
SCALAR_IBC_VALUE = (1.024 / 3.0) / 1.6


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    monkeypatch.delenv(DATABASE_URL_ENV, raising=False)


@pytest.fixture(scope="session")
def scalar():
    return scalar_model()


@pytest.fixture(scope="session")
def manufactured(scalar):
    return manufactured_scalar_solution(scalar)


@pytest.fixture(scope="session")
def euler():
    return euler_model()


@pytest.fixture(scope="session")
def nozzle(euler):
    return reference_solution_for(euler)


@pytest.fixture(scope="session")
def scalar_viscous(scalar):
    """Converged scalar solve at eps = 0.01, h = eps/8."""
    grid = GridPolicy(kappa=8.0).grid_for(0.01)
    return solve_viscous_primal(scalar, grid, 0.01)


@pytest.fixture(scope="session")
def scalar_viscous_fine(scalar):
    """Converged scalar solve at eps = 1e-3, h = eps/8."""
    grid = GridPolicy(kappa=8.0).grid_for(1e-3)
    return solve_viscous_primal(scalar, grid, 1e-3)


@pytest.fixture(scope="session")
def scalar_viscous_adjoint(scalar, scalar_viscous):
    return solve_viscous_adjoint(scalar, scalar_viscous, "dirichlet-zero")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
