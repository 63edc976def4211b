"""Exception hierarchy shared across the package."""


class DpmfError(Exception):
    """Base class for all package errors."""


class DataError(DpmfError):
    """Malformed, out-of-range, or corrupt input data."""


class DivergenceError(DpmfError):
    """Training produced a non-finite value."""


class RetryLimitError(DpmfError):
    """The prediction-range constraint loop exhausted its retry budget."""


class SingularSystemError(DpmfError):
    """A local least-squares system is singular (use a positive ridge term)."""
