"""Exception types shared across the package.

Every error raised on purpose by this package derives from DeepCoderError,
so callers can catch one base class at the boundary.  The CLI maps each
subclass to a stable process exit code.
"""


class DeepCoderError(Exception):
    """Base class for all errors raised deliberately by this package."""


class InvalidArgumentError(DeepCoderError):
    """A caller passed an argument that violates a documented contract."""


class ShapeError(InvalidArgumentError):
    """An array argument has the wrong shape or dtype."""


class ConfigError(DeepCoderError):
    """A configuration file or value is malformed or out of range."""


class FormatError(DeepCoderError):
    """A file on disk does not match the expected serialization format."""


class NumericalError(DeepCoderError):
    """A numerical routine left its domain of validity (non-PSD matrix,
    non-finite intermediate, degenerate posterior)."""


class TrainingError(DeepCoderError):
    """Training could not proceed (diverged loss, empty split, bad state)."""
