"""Exception hierarchy shared across the package."""


class MDDFError(Exception):
    """Base class for all package errors."""


class ContractError(MDDFError, ValueError):
    """An input violates an operation's shape or value contract."""


class ConfigurationError(MDDFError, ValueError):
    """A configuration value is invalid (divisibility, unknown keys, ...)."""


class GradCheckError(MDDFError):
    """A gradient check hit a non-finite value."""

    def __init__(self, message: str, index=None):
        super().__init__(message)
        self.index = index


class EvaluationError(MDDFError):
    pass


class EstimationError(MDDFError):
    pass


class MeasurementError(MDDFError):
    pass


class DataError(MDDFError):
    """Dataset loading or conversion failed."""


class NumericFault(MDDFError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
