"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DataError(ValueError):
    """Malformed, missing or inconsistent input data (CLI exit code 3)."""


class ShapeError(DataError):
    """Incompatible tensor or parameter shapes."""
