"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class UsageError(ValueError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ParseError(ValueError):
    """A file (PPM, DST1 container, config) could not be parsed."""


class ConfigError(ValueError):
    """A configuration value is unknown, malformed, or out of range."""


class GeometryError(ValueError):
    """A point/box lies outside the region required by the operation."""


class EmptyOverlapError(RuntimeError):
    """Two views share no intersection; the caller decides the fallback."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; carries a diagnostic dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
