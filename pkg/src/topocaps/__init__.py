"""Topographic variational autoencoders with capsule Roll equivariance, in NumPy."""

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    FormatError,
    TopocapsError,
    UndefinedCorrelationError,
    UsageError,
)
from .topography import CapsuleLayout, TopographyConfig

__version__ = "0.1.0"

__all__ = [
    "CapsuleLayout",
    "ConfigurationError",
    "DegenerateInputError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "TopocapsError",
    "TopographyConfig",
    "UndefinedCorrelationError",
    "UsageError",
]
