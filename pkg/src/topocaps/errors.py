"""Exception hierarchy shared by all topocaps modules."""


class TopocapsError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(TopocapsError, ValueError):
    """Invalid hyperparameters, layouts or config files."""


class DimensionError(TopocapsError, ValueError):
    """Array shapes do not line up."""


class DomainError(TopocapsError, ValueError):
    """A value lies outside the domain an operation accepts."""


class UsageError(TopocapsError, RuntimeError):
    """An API was called in an invalid order or state."""


class FormatError(TopocapsError, ValueError):
    """A file or byte payload is malformed."""


class DegenerateInputError(TopocapsError, ValueError):
    """Input for which a quantity is undefined (e.g. zero-norm vectors)."""


class UndefinedCorrelationError(DegenerateInputError):
    """Pearson correlation requested for a constant input."""
