"""Exception hierarchy shared across the package.

Errors are split by who can fix them: configuration errors point at config
files or CLI flags, validation errors point at malformed runtime inputs, and
numerical errors report non-finite values produced during a computation.
"""


class ProtoPartsError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ProtoPartsError):
    """A config value is out of range, inconsistent, or unusable."""


class ValidationError(ProtoPartsError):
    """A runtime input failed validation."""


class DimensionError(ValidationError):
    """An array or tensor has the wrong shape or rank."""


class DomainError(ValidationError):
    """A value lies outside the domain an operation is defined on."""


class ProjectionError(ValidationError):
    """Prototype projection found no candidate patches for a class."""


class NumericalError(ProtoPartsError):
    """A computation produced NaN or infinity where a finite value is required."""
