"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so keep the split between configuration
problems (exit 2) and numerical failures (exit 3) intact.
"""


class MFGLabError(Exception):
    """Base class for all library errors."""


class ConfigurationError(MFGLabError, ValueError):
    """Inconsistent or unknown configuration (tags, classes, counts)."""


class GeometryError(ConfigurationError):
    """Obstacle or boundary patch violates the domain constraints."""


class ValidationError(ConfigurationError):
    """Input data violate a hypothesis (sign, support, non-triviality)."""


class PreconditionError(MFGLabError, ValueError):
    """Operation called with inputs that do not fit together."""


class SolverError(MFGLabError, RuntimeError):
    """A numerical solve failed. ``residual`` carries the last residual seen."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(SolverError):
    """Fixed-point iteration stopped contracting."""


class NonConvergenceError(SolverError):
    """Iteration cap reached before the tolerance."""


class AmbiguityError(MFGLabError):
    """Obstacle search could not separate the best candidates."""

    def __init__(self, message, tie_set=None, residuals=None):
        super().__init__(message)
        self.tie_set = list(tie_set or [])
        self.residuals = residuals


class StageError(MFGLabError):
    """A reconstruction stage failed; the partial estimate is attached."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
