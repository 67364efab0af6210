"""Exception hierarchy shared across the package."""


class DcaunetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DcaunetError):
    """Operands have incompatible or invalid shapes."""


class GeometryError(ShapeError):
    """Spatial extents violate a window/stride/stage divisibility rule."""


class ConfigError(DcaunetError):
    """A configuration value is out of its valid domain."""


class NumericsError(DcaunetError):
    """A non-finite value (NaN/Inf) was produced where finiteness is required."""


class UsageError(DcaunetError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class FileFormatError(DcaunetError):
    """A file on disk does not match its documented format."""
