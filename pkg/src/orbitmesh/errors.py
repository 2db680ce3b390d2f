"""Exception types shared across the package."""


class OrbitMeshError(Exception):
    """Base class for all package errors."""


class ConfigError(OrbitMeshError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class ShapeError(OrbitMeshError, ValueError):
    """Array arguments have incompatible or unsupported shapes."""


class ConditionError(OrbitMeshError, ValueError):
    """Condition set is missing entries or mismatches the model stage."""


class ProjectionError(OrbitMeshError, ValueError):
    """Point cannot be projected (at or behind the camera plane)."""


class RangeError(OrbitMeshError, ValueError):
    """Scalar or index argument outside its valid range."""


class NumericError(OrbitMeshError, RuntimeError):
    """Non-finite value encountered; the message identifies the term."""


class ParseError(OrbitMeshError, ValueError):
    """Malformed external file; the message includes the line number."""


class CheckpointError(OrbitMeshError, RuntimeError):
    """Missing or unreadable model checkpoint."""
