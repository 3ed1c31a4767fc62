"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3.
"""


class NsslError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NsslError, ValueError):
    """Bad shapes, out-of-range parameters, unknown generators or keys."""


class InconsistentDataError(NsslError, ValueError):
    """Input data violates a solvability condition (e.g. nonzero mean source)."""


class NumericalError(NsslError, ArithmeticError):
    """Base class for failures detected while integrating."""


class DivergenceError(NumericalError):
    """Non-finite coefficients appeared during time stepping."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StabilityError(NumericalError):
    """A CFL-type limit was exceeded."""

    def __init__(self, message, cfl=None):
        super().__init__(message)
        self.cfl = cfl


class NonContractionError(NumericalError):
    """A fixed-point iteration failed to contract."""


class CertifiedRegionError(NumericalError):
    """A Neumann-series or smallness precondition does not hold."""


class TopologyError(NumericalError):
    """A tracked marker curve intersected itself."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class WindowError(NsslError, ValueError):
    """Too few samples in a fitting window."""


class DegenerateInputError(NsslError, ValueError):
    """A ratio monitor was asked to divide by zero."""
