"""Error types raised across the package."""

__all__ = [
    "ApsidalError",
    "ConfigError",
    "DegreeMismatchError",
    "SeriesSingularityError",
    "IntegrationError",
    "EventNotFoundError",
    "TangencyError",
    "ConvergenceError",
    "NonHyperbolicError",
    "UnsolvableError",
    "DomainError",
    "DegenerateSeriesError",
    "LostIntersectionError",
]


class ApsidalError(Exception):
    """Base class for everything we raise on purpose."""


class ConfigError(ApsidalError, ValueError):
    """A run configuration that fails validation; the message names
    the offending key."""


class DegreeMismatchError(ApsidalError, ValueError):
    """Series operands of different truncation degree."""


class SeriesSingularityError(ApsidalError, ValueError):
    """Division by a series with zero constant term, or a real power of
    a series whose constant term is not strictly positive."""


class IntegrationError(ApsidalError, RuntimeError):
    """The integrator failed (step underflow, non-finite field, step
    budget exhausted). Usually a close encounter with a primary."""


class EventNotFoundError(ApsidalError, RuntimeError):
    """No section crossing of the requested kind within max_time."""


class TangencyError(ApsidalError, RuntimeError):
    """A section operation hit a state where the section function has
    zero derivative along the flow."""


class ConvergenceError(ApsidalError, RuntimeError):
    """An iterative solve (Newton, contraction, bisection) did not meet
    its tolerance within the allowed iterations."""


class NonHyperbolicError(ApsidalError, ValueError):
    """Monodromy without a real multiplier pair off the unit circle."""


class UnsolvableError(ApsidalError, ValueError):
    """A circle-sequence equation whose solvability condition fails."""


class DomainError(ApsidalError, ValueError):
    """Inputs outside the documented domain of an operation."""


class DegenerateSeriesError(ApsidalError, RuntimeError):
    """A manifold series whose invariance defect exceeds tolerance even
    at negligible parameter values; the expansion carries no usable
    neighborhood."""


class LostIntersectionError(ApsidalError, RuntimeError):
    """Bisection refinement lost the crossing (tangency or a spurious
    segment hit)."""
