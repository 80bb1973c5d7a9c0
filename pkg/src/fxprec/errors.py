"""Exception hierarchy shared by every module."""


class FxError(Exception):
    """Base class for all package errors."""


class FormatError(FxError, ValueError):
    """A fixed-point format parameter is not an exact power of two."""


class DomainError(FxError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericError(FxError, ArithmeticError):
    """Non-finite input, underflow, or a solver that failed to converge."""


class StateError(FxError, RuntimeError):
    """Tracker state is incompatible with the supplied update."""


class AssignmentError(FxError, RuntimeError):
    """Precision assignment could not produce a valid configuration."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic


class ConfigurationError(FxError, ValueError):
    """A training run was configured inconsistently with its precision config."""


class SchemaError(FxError, ValueError):
    """An interchange document does not match its schema."""

    def __init__(self, message, location=None):
        super().__init__(message if location is None else f"{location}: {message}")
        self.location = location
