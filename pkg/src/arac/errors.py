class AracError(Exception):
    """Base class for all library errors."""


class ShapeError(AracError, ValueError):
    """Operand extents are incompatible with an operation."""


class ConfigError(AracError, ValueError):
    """Model or run configuration is inconsistent."""


class ValidationError(AracError, ValueError):
    """Input data violates a documented bound."""


class DegenerateInputError(ValidationError):
    """Input that leaves nothing to compute, e.g. a fully masked sequence."""


class UsageError(AracError, RuntimeError):
    """API called out of order or with an unsupported argument."""


class CorruptFileError(AracError, OSError):
    """Archive failed magic, version, size or checksum validation."""
