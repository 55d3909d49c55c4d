"""Exception types shared across the package."""


class RISError(Exception):
    """Base class for engine errors."""


class ConfigurationError(RISError, ValueError):
    """Shapes, names or settings that cannot work together."""


class UsageError(RISError, ValueError):
    """An operation was called with arguments outside its contract."""


class NonFiniteError(RISError, FloatingPointError):
    """A loss or gradient became NaN/inf; the offending step was not applied."""


class InvalidMazeError(RISError, ValueError):
    """The maze has no usable free space."""
