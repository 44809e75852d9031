"""Exception base classes shared across the package."""


class AgriRadarError(Exception):
    """Base class for every error raised by agriradar."""
    pass


class ConfigError(AgriRadarError):
    """Raised when a configuration value or file is invalid."""
    pass
