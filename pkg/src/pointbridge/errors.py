"""Error types raised across the library, grouped by CLI exit code."""


class PointBridgeError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class UsageError(PointBridgeError):
    """Malformed command-line invocation."""

    exit_code = 2


class ConfigError(PointBridgeError):
    """Invalid or inconsistent configuration."""

    exit_code = 3


class IOFormatError(PointBridgeError):
    """Unreadable or corrupt artifact file."""

    exit_code = 4


class NumericError(PointBridgeError):
    """Numeric failure: degenerate geometry or non-finite results."""

    exit_code = 5


class DegenerateCloud(NumericError):
    """Cloud has no spatial extent (all points coincide)."""


class InvalidCount(ConfigError):
    """Requested element count is out of range."""


class InvalidK(ConfigError):
    """Neighbor count exceeds the reference set size (or is < 1)."""


class ConfigMismatch(ConfigError):
    """Input does not match the shape the config promises."""


class ModeMismatch(ConfigError):
    """Projection mode of a table or positions disagrees with the config."""


class DimMismatch(ConfigError):
    """Feature dimensionality disagrees with the backbone width."""


class GeometryMismatch(ConfigError):
    """Positional-encoding geometry disagrees with the projection config."""


class ManifestError(IOFormatError):
    """Checkpoint manifest is missing, unparseable, or structurally wrong."""


class ShapeError(IOFormatError):
    """Stored tensor shape disagrees with the declared architecture."""


class ChecksumError(IOFormatError):
    """Stored tensor bytes fail their CRC32 check."""


class MissingTensor(IOFormatError):
    """A tensor required by the architecture is absent from the checkpoint."""


class NonScalarLoss(NumericError):
    """Loss callable returned something other than a scalar."""
