"""Exception hierarchy shared across the package."""


class UrbanVitalityError(Exception):
    """Base class for all package errors."""


class GeometryError(UrbanVitalityError):
    """Invalid or degenerate geometry."""


class DataError(UrbanVitalityError):
    """Input file failed validation (parse error, bad schema, bad value)."""


class ConfigError(UrbanVitalityError):
    """Configuration file is missing, malformed, or inconsistent."""


class EmptySetError(UrbanVitalityError):
    """An operation that requires a non-empty feature set received an empty one."""
