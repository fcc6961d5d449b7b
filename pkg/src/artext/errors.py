"""Exception hierarchy shared across the package."""


class ArtextError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ArtextError):
    """Operands or buffers have incompatible shapes."""


class NumericError(ArtextError):
    """A computation produced NaN or Inf, or is otherwise numerically invalid."""


class UsageError(ArtextError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class ConfigError(ArtextError):
    """A configuration value is out of its legal range."""


class DataError(ArtextError):
    """A file could not be parsed or has inconsistent content."""


class EmptyMaskError(DataError):
    """An operation that needs at least one nonzero pixel got an all-zero mask."""
