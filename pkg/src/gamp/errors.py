"""Exception types shared across the package."""


class GampError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GampError, ValueError):
    """Bad inputs, malformed files, or violated preconditions."""


class NumericalError(GampError, ArithmeticError):
    """Singular matrices, non-finite values, diverged computations."""
