import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from shockadjoint.core.errors import ConfigError

logger = logging.getLogger(__name__)

WORKERS_ENV = "SHOCK_ADJOINT_WORKERS"
DATABASE_URL_ENV = "SHOCK_ADJOINT_DATABASE_URL"

# Per-model sweep defaults used when the config gives neither a list nor a generator
DEFAULT_EPS0 = {"scalar": 0.05, "euler-nozzle": 0.004}
DEFAULT_EPS_COUNT = {"scalar": 7, "euler-nozzle": 5}
DEFAULT_BC_POLICY = {"scalar": "dirichlet-zero", "euler-nozzle": "linearized-characteristic"}


def _geometric(start: float, factor: float, count: int) -> List[float]:
    return [start * factor ** k for k in range(count)]


def _check_decreasing(values: List[float], name: str) -> None:
    if not values:
        raise ValueError(f"{name} must not be empty")
    if any(v <= 0 for v in values):
        raise ValueError(f"{name} must contain positive values only")
    if any(b >= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{name} must be strictly decreasing")


class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Literal["scalar", "euler-nozzle"] = "scalar"
    output_dir: str = "runs"
    seed: int = 1234
    workers: Optional[int] = Field(None, ge=1, description="Worker pool size, default = available cores")
    jacobian_samples: int = Field(100, ge=1)


class EulerSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(1.4, gt=1.0)
    alpha0: float = Field(1.0, gt=0.0)
    alpha1: float = 0.0
    area_coefficient: float = Field(0.8, gt=0.0, description="A(x) = 1 + c (x - throat)^2")
    throat: float = Field(0.5, gt=0.0, lt=1.0)
    outflow_pressure: float = Field(0.77, gt=0.0)
    inflow_entropy: float = 0.0
    inflow_enthalpy: float = Field(3.5, gt=0.0)


class ViscositySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps_list: Optional[List[float]] = None
    eps0: Optional[float] = Field(None, gt=0.0)
    factor: float = Field(0.5, gt=0.0, lt=1.0)
    count: Optional[int] = Field(None, ge=1)
    kappa: float = Field(8.0, gt=0.0, description="Grid policy h = eps / kappa")
    max_nodes: int = Field(200_000, ge=17)
    theta: float = Field(0.05, gt=0.0, lt=1.0)
    theta_sensitivity: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.1])
    bc_policy: Optional[Literal["dirichlet-zero", "linearized-characteristic"]] = None
    newton_tolerance: float = Field(1e-10, gt=0.0)
    max_newton_iterations: int = Field(50, ge=1)
    max_halvings: int = Field(20, ge=0)

    @model_validator(mode="after")
    def _check_sweep(self) -> "ViscositySection":
        if self.eps_list is not None:
            _check_decreasing(self.eps_list, "eps_list")
        for theta in self.theta_sensitivity:
            if not 0.0 < theta < 1.0:
                raise ValueError("theta_sensitivity values must lie in (0, 1)")
        return self


class PerturbationSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nu_list: Optional[List[float]] = None
    nu0: float = Field(1e-2, gt=0.0)
    factor: float = Field(0.5, gt=0.0, lt=1.0)
    count: int = Field(6, ge=1)
    coupling: float = Field(0.5, description="alpha_bar = coupling * nu")
    internal_offset: float = Field(0.1, description="Target internal term of the offset adjoint")
    probe_points: int = Field(10_000, ge=100)

    @model_validator(mode="after")
    def _check_sweep(self) -> "PerturbationSection":
        if self.nu_list is not None:
            _check_decreasing(self.nu_list, "nu_list")
        return self

    def resolved_nu_list(self) -> List[float]:
        if self.nu_list is not None:
            return list(self.nu_list)
        return _geometric(self.nu0, self.factor, self.count)


class AcceptanceSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enforce: bool = True
    slope_min: float = 0.8
    slope_max: float = 1.2
    r2_min: float = 0.98
    theta_slope_spread: float = 0.1
    theta_relative_spread: float = 0.2
    euler_gap_max: float = 0.1
    proof_identity_max: float = 1e-8
    defect_decay_factor: float = 1.5
    effectivity_min: float = 0.9
    effectivity_max: float = 1.1
    plateau_tolerance: float = 0.1


class ExperimentConfig(BaseModel):
    """Complete experiment description, one section per config table."""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    euler: EulerSection = Field(default_factory=EulerSection)
    viscosity: ViscositySection = Field(default_factory=ViscositySection)
    perturbation: PerturbationSection = Field(default_factory=PerturbationSection)
    acceptance: AcceptanceSection = Field(default_factory=AcceptanceSection)

    @property
    def selected_model(self) -> str:
        return self.experiment.model

    def resolved_eps_list(self) -> List[float]:
        v = self.viscosity
        if v.eps_list is not None:
            return list(v.eps_list)
        eps0 = v.eps0 if v.eps0 is not None else DEFAULT_EPS0[self.selected_model]
        count = v.count if v.count is not None else DEFAULT_EPS_COUNT[self.selected_model]
        return _geometric(eps0, v.factor, count)

    def resolved_bc_policy(self) -> str:
        return self.viscosity.bc_policy or DEFAULT_BC_POLICY[self.selected_model]

    def policy_warnings(self) -> List[str]:
        warnings = []
        if self.viscosity.kappa < 5.0:
            warnings.append(
                f"layer under-resolved: kappa={self.viscosity.kappa:g} gives h > eps/5"
            )
        return warnings


def _raise_config_error(exc: ValidationError, source: str) -> None:
    problems = "; ".join(
        f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
    )
    raise ConfigError(f"Invalid configuration {source}: {problems}") from exc


def config_from_dict(data: Dict[str, Any], source: str = "<dict>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        _raise_config_error(exc, source)


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read a TOML experiment file. No path means all defaults."""
    if path is None:
        return ExperimentConfig()
    config_path = Path(path)
    try:
        with config_path.open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {config_path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Config file {config_path} is not valid: {exc}") from exc
    config = config_from_dict(data, source=str(config_path))
    logger.debug(f"Loaded config {config_path}")
    return config


def resolve_workers(config: ExperimentConfig) -> Tuple[int, str]:
    """Worker pool size and where it came from (env, config or cpu count)."""
    load_dotenv()
    env_value = os.getenv(WORKERS_ENV)
    if env_value:
        try:
            workers = int(env_value)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env_value!r}") from exc
        if workers < 1:
            raise ConfigError(f"{WORKERS_ENV} must be at least 1")
        return workers, f"env:{WORKERS_ENV}"
    if config.experiment.workers is not None:
        return config.experiment.workers, "config"
    return os.cpu_count() or 1, "cpu_count"


def resolve_database_url(output_dir: Path) -> str:
    load_dotenv()
    return os.getenv(DATABASE_URL_ENV, f"sqlite:///{Path(output_dir).resolve() / 'ledger.sqlite'}")
