"""Portable checkpoint archives: manifest.json + tensors.bin.

An archive is a directory (or a single .zip) holding two entries:

* ``manifest.json``: format tag, free-form ``meta`` section, and a
  tensor registry: name, shape, dtype, byte offset, byte count, CRC32.
* ``tensors.bin``: concatenated little-endian float32 payloads, each
  tensor aligned to a 64-byte boundary with zero padding between.

The same container stores frozen backbones, trainable-parameter
snapshots, and exporter output; readers validate every tensor's CRC and
its shape/byte-count consistency before returning data.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
import zlib

import numpy as np

from .errors import ChecksumError, ManifestError

FORMAT_TAG = "pointbridge-checkpoint/1"
ALIGNMENT = 64

_MANIFEST = "manifest.json"
_BLOB = "tensors.bin"


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_archive(
    path: str, meta: dict, tensors: dict[str, np.ndarray]
) -> None:
    """Write an archive; a path ending in .zip becomes a single zip file.

    Tensors are stored as little-endian float32 in dict order. Output is
    byte-deterministic: manifest keys are sorted and zip entries carry a
    fixed timestamp.
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


def read_archive(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and validate an archive.

    Returns:
        (meta dict, tensors dict of float32 arrays, in registry order).

    Raises:
        ManifestError: missing files, bad JSON, wrong format tag, or a
            malformed registry entry.
        ChecksumError: CRC mismatch or payload truncation, naming the
            offending tensor.
    """
    manifest_bytes, blob = _read_entries(path)
    try:
        manifest = json.loads(manifest_bytes)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise ManifestError(f"{path}: unknown format {manifest.get('format')!r}")
    registry = manifest.get("tensors")
    if not isinstance(registry, list):
        raise ManifestError(f"{path}: manifest lacks a tensor registry")
    tensors: dict[str, np.ndarray] = {}
    for entry in registry:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
            crc = int(entry["crc32"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: malformed registry entry {entry!r}") from exc
        if dtype != "f4":
            raise ManifestError(f"{path}: tensor {name!r} has dtype {dtype!r}")
        if nbytes != int(np.prod(shape)) * 4:
            raise ManifestError(
                f"{path}: tensor {name!r} shape {shape} inconsistent with"
                f" {nbytes} bytes"
            )
        payload = blob[offset : offset + nbytes]
        if len(payload) != nbytes:
            raise ChecksumError(f"{path}: tensor {name!r} payload truncated")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"{path}: tensor {name!r} fails CRC32 check")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    meta = manifest.get("meta")
    if not isinstance(meta, dict):
        raise ManifestError(f"{path}: manifest lacks a meta section")
    return meta, tensors
