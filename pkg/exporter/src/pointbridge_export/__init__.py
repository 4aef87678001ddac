"""Checkpoint exporter: foreign transformer weights in, portable archives out.

Public surface:

* ``ExportSpec`` / ``export``: convert a published checkpoint (CLIP-style
  text tower, DINOv2-style vision tower, or any model described by a
  mapping table) into the manifest + blob archive format.
* ``validate``: re-verify every tensor of an existing archive against
  its manifest, returning a per-tensor report.
* ``read_archive`` / ``load_mapping``: lower-level access for tooling.
"""

from .archive import (
    ALIGNMENT,
    FORMAT_TAG,
    TensorCheck,
    ValidationReport,
    read_archive,
    validate_archive,
    write_archive,
)
from .errors import (
    ChecksumError,
    ExportError,
    GeometryMismatch,
    ManifestError,
    MappingError,
    MissingTensor,
    ShapeError,
    SourceError,
)
from .exporter import ExportResult, ExportSpec, export, load_mapping, load_source, resize_grid_bilinear

validate = validate_archive

__all__ = [
    "ALIGNMENT",
    "FORMAT_TAG",
    "ChecksumError",
    "ExportError",
    "ExportResult",
    "ExportSpec",
    "GeometryMismatch",
    "ManifestError",
    "MappingError",
    "MissingTensor",
    "ShapeError",
    "SourceError",
    "TensorCheck",
    "ValidationReport",
    "export",
    "load_mapping",
    "load_source",
    "read_archive",
    "resize_grid_bilinear",
    "validate",
    "validate_archive",
    "write_archive",
]
