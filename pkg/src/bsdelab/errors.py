"""Exception hierarchy shared across the package.

Every error carries enough context to reproduce the failure (offending
indices, achieved brackets, trace objects) because the batch front door
reports them verbatim.
"""


class BsdeLabError(Exception):
    """Base class for all package errors."""


class MalformedInputError(BsdeLabError):
    """Inputs violate a documented precondition (empty field, bad shapes...)."""


class NumericContaminationError(BsdeLabError):
    """Non-finite values encountered; ``indices`` lists offending positions."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class SingularIntegrandError(BsdeLabError):
    """An integrand vanished or blew up inside the integration range."""


class RangeOverflowError(BsdeLabError):
    """A monotone inversion left the numerically reachable range.

    ``bracket`` holds the best (lo, hi) bracket achieved before giving up.
    """

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class SolverDivergenceError(BsdeLabError):
    """The backward solver failed to converge.

    ``where`` carries the offending (time index, path index) pairs for
    inner fixed-point failures, or the Picard trace for outer failures.
    """

    def __init__(self, message, where=None, trace=None):
        super().__init__(message)
        self.where = where
        self.trace = trace


class ConfigurationError(BsdeLabError):
    """A run configuration is invalid; message names the offending field."""
