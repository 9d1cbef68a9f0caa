from typing import Optional


class ShockAdjointError(Exception):
    """Base error. Carries a process exit code and a human readable detail."""

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(ShockAdjointError):
    """Invalid experiment configuration"""

    exit_code = 2


class DomainError(ShockAdjointError, ValueError):
    """A state outside the admissible set of a model"""

    def __init__(self, detail: str, component: Optional[int] = None):
        super().__init__(detail)
        self.component = component


class TransformError(ShockAdjointError, ValueError):
    """Bad coordinate transform parameters"""


class NoTransonicSolutionError(ShockAdjointError):
    """Boundary data admits no shock inside the diverging section"""


class ShockAtThroatError(ShockAdjointError):
    """Shock sits where A'(x) vanishes"""


class ShockDataError(ShockAdjointError):
    """Shock location or trace data missing or inconsistent"""


class SolverDivergenceError(ShockAdjointError):
    exit_code = 3


class SingularSystemError(ShockAdjointError):
    exit_code = 3

    def __init__(self, detail: str, pivot_ratio: Optional[float] = None):
        if pivot_ratio is not None:
            detail = f"{detail} (diagonal pivot ratio {pivot_ratio:.3e})"
        super().__init__(detail)
        self.pivot_ratio = pivot_ratio


class NoInteriorLayerError(ShockAdjointError):
    """Gradient maximum at a boundary node or at the edge of its search window"""


class TransitionRegionError(ShockAdjointError):
    """Layer gradient does not settle to its background inside the search window"""


class OracleError(ShockAdjointError):
    pass


class InsufficientDataError(ShockAdjointError):
    pass


class AcceptanceError(ShockAdjointError):
    exit_code = 4
