"""Exception hierarchy shared across the package."""


class GencdetError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(GencdetError, ValueError):
    """A configuration object violates its invariants."""


class DimensionError(GencdetError, ValueError):
    """Array shapes do not agree with the declared dimensions."""


class TrainingDivergenceError(GencdetError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class PreconditionError(GencdetError, ValueError):
    """An operation was called outside its domain."""


class DataError(GencdetError, ValueError):
    """Input data could not be loaded or is unusable."""
