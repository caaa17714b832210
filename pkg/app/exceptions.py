from typing import Any, Optional


class BaseAppException(Exception):
    """
    Base exception for all application errors.

    Provides consistent structure with exit_code, error_code, and details.
    """

    exit_code: int = 1
    error_code: str = "INTERNAL_ERROR"

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.message = message
        if error_code:
            self.error_code = error_code
        self.details = details or {}


class ValidationException(BaseAppException):
    """Invalid input data (exit code 2)."""

    exit_code = 2
    error_code = "VALIDATION_ERROR"


class StateException(BaseAppException):
    """Operation not allowed in the current state."""

    exit_code = 1
    error_code = "INVALID_STATE"


class NotFoundException(BaseAppException):
    """Resource not found (exit code 2)."""

    exit_code = 2
    error_code = "RESOURCE_NOT_FOUND"


class SimulationException(BaseAppException):
    """Crystal plasticity simulation failure (exit code 3)."""

    exit_code = 3
    error_code = "SIMULATION_ERROR"


class SystemException(BaseAppException):
    """Internal system error."""

    exit_code = 1
    error_code = "SYSTEM_ERROR"


# Domain-specific exceptions
class InvalidArgumentException(ValidationException):
    """Argument outside the domain of an operation."""

    error_code = "INVALID_ARGUMENT"

    def __init__(self, message: str, **details: Any):
        super().__init__(message=message, details=details)


class ConfigException(ValidationException):
    """Run configuration failed validation."""

    error_code = "CONFIG_INVALID"

    def __init__(self, message: str, errors: Optional[list[dict[str, Any]]] = None):
        super().__init__(message=message, details={"errors": errors or []})


class ArtifactNotFoundException(NotFoundException):
    """Texture, grid, path or checkpoint file missing."""

    error_code = "ARTIFACT_NOT_FOUND"

    def __init__(self, path: str):
        super().__init__(
            message=f"Artifact not found: {path}",
            details={"path": path},
        )


class IntegrationFailureException(SimulationException):
    """Crystal integration did not converge within the substep cap."""

    error_code = "SIM_INTEGRATION_FAILURE"

    def __init__(self, substeps: int, max_substeps: int, **details: Any):
        super().__init__(
            message=f"Crystal integration exceeded {max_substeps} substeps",
            details={"substeps": substeps, "max_substeps": max_substeps, **details},
        )


class BalancingFailureException(SimulationException):
    """Lateral stress balance did not converge."""

    error_code = "SIM_BALANCING_FAILURE"

    def __init__(self, iterations: int, residual_mpa: float, **details: Any):
        super().__init__(
            message=f"Lateral stress balance failed after {iterations} iterations",
            details={
                "iterations": iterations,
                "residual_mpa": residual_mpa,
                **details,
            },
        )


class TrainingFailureException(SystemException):
    """Non-finite loss or parameters during a network update."""

    error_code = "TRAINING_NON_FINITE"

    def __init__(self, step: int, snapshot_path: Optional[str] = None):
        super().__init__(
            message=f"Non-finite loss at training step {step}",
            details={"step": step, "snapshot_path": snapshot_path},
        )


class InternalConsistencyException(SystemException):
    """A self-check of a derived quantity failed."""

    error_code = "INTERNAL_CONSISTENCY"

    def __init__(self, message: str, **details: Any):
        super().__init__(message=message, details=details)
