"""Exception types shared across the package."""


class PstError(Exception):
    """Base class for all package errors."""


class ShapeError(PstError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(PstError, ValueError):
    """A configuration value is invalid (e.g. head count does not divide d)."""


class ParameterError(PstError, ValueError):
    """An operation parameter is out of its valid range."""


class NumericError(PstError, ArithmeticError):
    """A computation produced or received non-finite values."""


class EmptySetError(PstError, ValueError):
    """A set-valued input was empty where at least one element is required."""


class PatchTooSmallError(PstError, ValueError):
    """Spatial extent is below the minimum the network can process."""


class DegenerateStatisticsError(PstError, ValueError):
    """Batch statistics requested over fewer than two elements."""


class DegenerateLightingError(PstError, ValueError):
    """Light matrix is rank deficient or too ill-conditioned to invert."""

    def __init__(self, message: str, condition_number: float = float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


class UndefinedMetricError(PstError, ValueError):
    """A metric was requested over an empty support (e.g. empty mask)."""


class ContractError(PstError, ValueError):
    """A caller violated an interface contract (missing field, bad sizes)."""


class FormatError(PstError, ValueError):
    """A serialized file does not conform to its on-disk format."""


class VersionError(FormatError):
    """File carries an unknown or unsupported format version tag."""


class TruncatedError(FormatError):
    """File ended before the declared payload was complete."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class UsageError(PstError, ValueError):
    """Command line arguments or config keys could not be interpreted."""
