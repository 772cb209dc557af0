"""Exception types shared across the package."""


class SpawnNetError(Exception):
    """Base class for all package errors."""


class ConfigError(SpawnNetError, ValueError):
    """Invalid or inconsistent configuration."""


class DimensionError(SpawnNetError, ValueError):
    """An array does not have the shape an operation requires."""


class InputError(SpawnNetError, ValueError):
    """Bad runtime input (empty dataset, missing features, shape mismatch)."""


class StaleCacheError(SpawnNetError):
    """A cache or checkpoint was produced under a different configuration."""


class StateError(SpawnNetError, RuntimeError):
    """Operation is not valid in the current environment state."""


class GenerationError(SpawnNetError):
    """Instance generation could not satisfy its constraints."""


class ComparisonError(SpawnNetError):
    """Runs cannot be compared (e.g. different benchmark splits)."""


class UnsupportedMethodError(SpawnNetError):
    """The requested operation does not apply to this method."""
