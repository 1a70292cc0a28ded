"""Exception classes shared across the package.

Three failure kinds are distinguished so that callers (and the CLI exit
codes) can react differently: bad argument values, bad or non-conformable
input data, and numerical breakdown inside a solver.
"""


class SpateconError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SpateconError, ValueError):
    """A parameter value is outside its admissible range."""


class InvalidInputError(SpateconError, ValueError):
    """Input data is malformed, non-conformable or otherwise unusable."""


class NumericFailureError(SpateconError, RuntimeError):
    """A numerical routine failed (non-SPD matrix, non-convergence, ...)."""
