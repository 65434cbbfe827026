"""Exception types shared across the package."""


class DefectForgeError(Exception):
    """Base class for all package errors."""


class ParameterError(DefectForgeError, ValueError):
    """An argument is outside its documented domain."""


class DimensionError(DefectForgeError, ValueError):
    """Array shapes are empty, too small, or mutually inconsistent."""


class NumericError(DefectForgeError, ArithmeticError):
    """A solver or integrator produced an unusable result."""
