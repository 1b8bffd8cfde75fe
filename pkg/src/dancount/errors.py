"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``NumericError`` to 3.
"""


class ValidationError(ValueError):
    """Input rejected before any computation (bad shape, file, config...)."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf or otherwise failed numerically."""
