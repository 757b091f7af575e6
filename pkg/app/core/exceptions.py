# 自定义异常类
# Custom Exception Classes

from typing import Any, Dict, Optional

from pydantic import ValidationError as PydanticValidationError


class SpineMPCException(Exception):
    """Base class for every error raised by the spine MPC package."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(SpineMPCException):
    """Experiment or runtime configuration is invalid."""

    pass


class DimensionMismatchError(SpineMPCException):
    """State, input or matrix dimensions disagree with the model."""

    pass


class CableGeometryError(SpineMPCException):
    """Cable length or rest length outside its physical range."""

    pass


class InverseKinematicsError(SpineMPCException):
    """No admissible static equilibrium exists for the requested pose."""

    pass


class TrajectoryError(SpineMPCException):
    """Reference trajectory cannot be generated or violates collision bounds."""

    pass


class SolverError(SpineMPCException):
    """QP solver failure."""

    pass


class QPNotConvexError(SolverError):
    """Cost matrix is not positive semidefinite."""

    pass


class QPInfeasibleError(SolverError):
    """Feasible set of the QP is empty."""

    pass


class ControllerError(SpineMPCException):
    """CFTOC could not produce an admissible input."""

    pass


class SimulationAbortedError(SpineMPCException):
    """Closed loop stopped after too many consecutive QP failures.

    The partial log is kept on the exception so callers can still write it out.
    """

    def __init__(self, message: str, log: Any = None, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.log = log


# 异常处理工具函数
def format_validation_locations(error: PydanticValidationError) -> str:
    """Render pydantic errors as `dotted.path: message` lines."""
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        lines.append(f"{location}: {item.get('msg', 'invalid value')}")
    return "\n".join(lines)


def handle_validation_error(error: Exception, source: str = "config") -> ConfigurationError:
    """处理数据验证相关错误"""
    if isinstance(error, PydanticValidationError):
        return ConfigurationError(
            f"{source} is invalid:\n{format_validation_locations(error)}",
            details={"errors": error.errors()},
        )
    return ConfigurationError(f"{source} is invalid: {error}")


def handle_solver_error(error: Exception) -> SolverError:
    """Wrap linear-algebra failures raised inside the solver."""
    if isinstance(error, SolverError):
        return error
    return SolverError(f"QP solve failed: {error}")
