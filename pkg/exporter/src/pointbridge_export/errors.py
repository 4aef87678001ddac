"""Exception types raised while converting foreign checkpoints."""


class ExportError(Exception):
    """Base class for every error this package raises deliberately."""


class SourceError(ExportError):
    """The source checkpoint file could not be read or decoded."""


class MappingError(ExportError):
    """A mapping table is missing, malformed, or references itself inconsistently."""


class MissingTensor(ExportError):
    """A tensor named by the mapping table is absent from the source checkpoint.

    The message always contains the source key that could not be found so
    failures can be traced back to the originating checkpoint layout.
    """

    def __init__(self, source_key: str, detail: str = "") -> None:
        self.source_key = source_key
        message = f"source tensor not found: {source_key!r}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GeometryMismatch(ExportError):
    """Source tensor shapes are incompatible with the requested target geometry."""


class ShapeError(ExportError):
    """A tensor's declared shape disagrees with its payload size."""


class ChecksumError(ExportError):
    """A tensor payload failed its recorded CRC32."""


class ManifestError(ExportError):
    """An archive's manifest is missing, unparseable, or structurally invalid."""
