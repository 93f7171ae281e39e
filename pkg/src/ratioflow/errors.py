"""Exception types shared across the package."""


class RatioFlowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RatioFlowError, ValueError):
    """Bad shapes, widths, or configuration values."""


class DomainError(RatioFlowError, ValueError):
    """A function was evaluated outside the region where it is defined."""


class IntegrationError(RatioFlowError, ArithmeticError):
    """Non-finite values produced while integrating an ODE."""

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class TrainingDivergedError(RatioFlowError, ArithmeticError):
    """The training loss became non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(RatioFlowError):
    """A checkpoint file could not be read."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass
