"""Reader, writer, and validator for the portable checkpoint archive.

An archive is a directory (or a single .zip) with two entries:

* ``manifest.json``: format tag ``pointbridge-checkpoint/1``, a free-form
  ``meta`` section, and a tensor registry listing name, shape, dtype,
  byte offset, byte count, and CRC32 for every payload.
* ``tensors.bin``: concatenated little-endian float32 payloads, each
  aligned to a 64-byte boundary with zero padding between.

This module implements the format from its published description rather
than sharing code with any consumer, so the exporter stays a genuinely
independent producer. Writing is byte-deterministic: manifest keys are
sorted, separators are fixed, and zip entries carry a constant
timestamp, so re-exporting the same tensors yields identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifestError

FORMAT_TAG = "pointbridge-checkpoint/1"
ALIGNMENT = 64

_MANIFEST = "manifest.json"
_BLOB = "tensors.bin"


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_archive(path: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` (in dict order) under ``path``.

    A path ending in ``.zip`` becomes a single stored (uncompressed) zip
    file; anything else becomes a directory with the two entries.
    """
    registry = []
    blob = io.BytesIO()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        offset = _align(blob.tell())
        blob.write(bytes(offset - blob.tell()))
        payload = arr.tobytes()
        blob.write(payload)
        registry.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f4",
                "offset": offset,
                "nbytes": len(payload),
                "crc32": zlib.crc32(payload),
            }
        )
    manifest = {"format": FORMAT_TAG, "meta": meta, "tensors": registry}
    manifest_bytes = json.dumps(
        manifest, sort_keys=True, separators=(",", ":")
    ).encode()
    blob_bytes = blob.getvalue()
    if path.endswith(".zip"):
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, payload in ((_MANIFEST, manifest_bytes), (_BLOB, blob_bytes)):
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, payload)
    else:
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, _MANIFEST), "wb") as fh:
            fh.write(manifest_bytes)
        with open(os.path.join(path, _BLOB), "wb") as fh:
            fh.write(blob_bytes)


def _read_entries(path: str) -> tuple[bytes, bytes]:
    if os.path.isfile(path) and (path.endswith(".zip") or zipfile.is_zipfile(path)):
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if _MANIFEST not in names or _BLOB not in names:
                raise ManifestError(f"{path}: archive lacks {_MANIFEST}/{_BLOB}")
            return zf.read(_MANIFEST), zf.read(_BLOB)
    if not os.path.isdir(path):
        raise ManifestError(f"{path}: not a checkpoint directory or zip archive")
    mpath = os.path.join(path, _MANIFEST)
    bpath = os.path.join(path, _BLOB)
    if not os.path.isfile(mpath):
        raise ManifestError(f"{path}: missing {_MANIFEST}")
    if not os.path.isfile(bpath):
        raise ManifestError(f"{path}: missing {_BLOB}")
    with open(mpath, "rb") as fh:
        manifest = fh.read()
    with open(bpath, "rb") as fh:
        blob = fh.read()
    return manifest, blob


def _parse_manifest(path: str, manifest_bytes: bytes) -> dict:
    try:
        manifest = json.loads(manifest_bytes)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise ManifestError(f"{path}: unknown format {manifest.get('format')!r}")
    if not isinstance(manifest.get("tensors"), list):
        raise ManifestError(f"{path}: manifest lacks a tensor registry")
    if not isinstance(manifest.get("meta"), dict):
        raise ManifestError(f"{path}: manifest lacks a meta section")
    return manifest


@dataclass
class TensorCheck:
    """Validation outcome for one registry entry.

    Attributes:
        name: tensor name from the manifest (or a placeholder when the
            entry is too malformed to carry one).
        status: "ok", or the error class the defect belongs to:
            "ManifestError" (entry malformed or wrong dtype),
            "ShapeError" (shape disagrees with byte count), or
            "ChecksumError" (payload truncated or CRC mismatch).
        detail: human-readable elaboration, empty when status is "ok".
    """

    name: str
    status: str
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ValidationReport:
    """Per-tensor check results for one archive."""

    path: str
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> list[TensorCheck]:
        return [c for c in self.checks if not c.ok]

    def lines(self) -> list[str]:
        return [f"{c.status:<15} {c.name}" + (f"  {c.detail}" if c.detail else "") for c in self.checks]


def _check_entry(entry: object, blob: bytes) -> TensorCheck:
    if not isinstance(entry, dict):
        return TensorCheck("<entry>", "ManifestError", f"not an object: {entry!r}")
    name = entry.get("name")
    if not isinstance(name, str):
        return TensorCheck("<entry>", "ManifestError", f"missing name: {entry!r}")
    try:
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(entry["nbytes"])
        crc = int(entry["crc32"])
        dtype = entry["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        return TensorCheck(name, "ManifestError", str(exc))
    if dtype != "f4":
        return TensorCheck(name, "ManifestError", f"dtype {dtype!r}, expected 'f4'")
    if nbytes != int(np.prod(shape)) * 4:
        return TensorCheck(
            name,
            "ShapeError",
            f"shape {list(shape)} needs {int(np.prod(shape)) * 4} bytes, manifest says {nbytes}",
        )
    payload = blob[offset : offset + nbytes]
    if len(payload) != nbytes:
        return TensorCheck(name, "ChecksumError", f"payload ends {nbytes - len(payload)} bytes early")
    if zlib.crc32(payload) != crc:
        return TensorCheck(name, "ChecksumError", f"crc32 {zlib.crc32(payload)} != recorded {crc}")
    return TensorCheck(name, "ok")


def validate_archive(path: str) -> ValidationReport:
    """Check every registry entry of an archive without loading tensors.

    Failures land in the report rather than raising, one check per
    tensor, so a single corrupt payload is pinpointed by name while the
    rest of the archive still reads "ok".

    Raises:
        ManifestError: only when no per-tensor report is possible, i.e.
            the archive or manifest itself is missing or unparseable.
    """
    manifest_bytes, blob = _read_entries(path)
    manifest = _parse_manifest(path, manifest_bytes)
    report = ValidationReport(path)
    for entry in manifest["tensors"]:
        report.checks.append(_check_entry(entry, blob))
    return report


def read_archive(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an archive, raising on the first validation failure.

    Returns:
        (meta dict, tensors dict of float32 arrays in registry order).
    """
    from .errors import ChecksumError, ShapeError

    classes = {
        "ManifestError": ManifestError,
        "ShapeError": ShapeError,
        "ChecksumError": ChecksumError,
    }
    manifest_bytes, blob = _read_entries(path)
    manifest = _parse_manifest(path, manifest_bytes)
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        check = _check_entry(entry, blob)
        if not check.ok:
            raise classes[check.status](f"{path}: tensor {check.name!r}: {check.detail}")
        shape = tuple(int(s) for s in entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        payload = blob[offset : offset + nbytes]
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return manifest["meta"], tensors
