"""Exception hierarchy of the toolkit.

Library modules raise these; only cli.dispatch turns them into exit codes.
"""

from typing import Iterable, Optional


class FvcToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(FvcToolkitError):
    def __init__(self, message: str, buses: Iterable[str] = ()):
        self.buses = list(buses)
        if self.buses:
            message = f"{message} (buses: {', '.join(self.buses)})"
        super().__init__(message)


class ParameterError(FvcToolkitError):
    pass


class PowerFlowError(FvcToolkitError):
    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")


class SingularLoadError(FvcToolkitError):
    pass


class ModelError(FvcToolkitError):
    def __init__(self, message: str, condition: Optional[float] = None):
        self.condition = condition
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)


class AssemblyError(FvcToolkitError):
    def __init__(self, message: str, block: str = ""):
        self.block = block
        super().__init__(f"{block}: {message}" if block else message)


class SolverError(FvcToolkitError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class Infeasible(FvcToolkitError):
    def __init__(self, message: str, family: str):
        self.family = family
        super().__init__(f"{message} (binding family: {family})")


class RecoveryError(FvcToolkitError):
    def __init__(self, message: str, condition: Optional[float] = None):
        self.condition = condition
        super().__init__(message)


class ReconstructionError(FvcToolkitError):
    pass


class PoleOnAxisError(FvcToolkitError):
    pass


class UnstableSystemError(FvcToolkitError):
    pass


class IntegrationError(FvcToolkitError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} at step {step}")


class MetricsError(FvcToolkitError):
    pass


class ParseError(FvcToolkitError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class ValidationError(FvcToolkitError):
    pass


class IoError(FvcToolkitError):
    def __init__(self, message: str, path: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class EventError(FvcToolkitError):
    """Failure while processing one switch event of a scenario."""

    def __init__(self, event_index: int, cause: Exception):
        self.event_index = event_index
        self.cause = cause
        super().__init__(f"event #{event_index}: {cause}")
