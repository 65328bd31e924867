"""Exception types shared across the package."""


class OmgrlError(Exception):
    """Base class for all package errors."""


class ShapeError(OmgrlError, ValueError):
    pass


class StateError(OmgrlError, RuntimeError):
    """Operation called in an invalid state (empty buffer, stale cache, ...)."""


class NumericError(OmgrlError, ArithmeticError):
    """Non-finite value encountered where a finite one is required."""


class DegenerateDataError(OmgrlError, ValueError):
    pass


class IngestionError(OmgrlError, ValueError):
    pass


class DegenerateEstimateError(OmgrlError, ArithmeticError):
    pass
