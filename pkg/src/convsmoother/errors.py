"""Exception types shared across the package."""


class ConvSmootherError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ConvSmootherError, ValueError):
    pass


class StateError(ConvSmootherError, RuntimeError):
    pass


class NumericalError(ConvSmootherError, ArithmeticError):
    pass


class TrainingDivergedError(NumericalError):
    pass


class SimulationDivergedError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EstimationDivergedError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigurationError(ConvSmootherError, ValueError):
    pass


class FormatError(ConvSmootherError, ValueError):
    """Raised for unreadable, truncated or mismatched container files."""


class ArchitectureMismatchError(FormatError):
    pass
