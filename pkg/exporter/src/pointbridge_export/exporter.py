"""Convert published transformer checkpoints into portable archives.

The conversion is driven by per-model mapping tables (versioned JSON
data files under ``mappings/``) that name, for one checkpoint family,
the source tensor behind each canonical target tensor. The exporter
itself only knows the target registry:

    cls.token                     (D,)
    pe.table                      (L, D) line  |  (Gh, Gw, D) grid
    blocks.{i}.ln1.{w,b}
    blocks.{i}.attn.{q,k,v,out}.{w,b}   weights (D, D), (in, out) layout
    blocks.{i}.ln2.{w,b}
    blocks.{i}.ffn.fc1.{w,b}      weight (D, F)
    blocks.{i}.ffn.fc2.{w,b}      weight (F, D)
    final_norm.{w,b}

Mapping tables may describe the attention projection either fused
(one ``attn.qkv.{w,b}`` pair holding q, k, v stacked along the output
rows, the common torch convention) or as three separate projections.
Source weights stored (out, in) are transposed. A canonical bias with
no mapping entry is synthesized as zeros. Everything lands as
little-endian float32, and the same spec applied to the same source
always produces byte-identical archives.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import torch

from . import archive
from .errors import GeometryMismatch, MappingError, MissingTensor, SourceError

LINE1D = "line1d"
PLANE2D = "plane2d"

_PE_LAYOUTS = ("line", "grid", "grid_with_cls")
_BLOCK_KEYS_FUSED = ("attn.qkv.w",)
_BLOCK_KEYS_SPLIT = ("attn.q.w", "attn.k.w", "attn.v.w")
_BLOCK_KEYS_COMMON = ("ln1.w", "attn.out.w", "ln2.w", "ffn.fc1.w", "ffn.fc2.w")


@dataclass
class ExportSpec:
    """One conversion request: which source, which geometry, where to.

    Attributes:
        source: path to the source checkpoint (.pt/.pth/.bin via torch,
            .npz via numpy).
        mapping: mapping-table name bundled with this package
            ("clip_text", "dinov2") or a path to a mapping JSON file.
        out: output archive path; ".zip" suffix selects the single-file
            form, anything else a directory.
        n_heads: attention head count of the source model. Head count
            is not recoverable from fused projection weights, so it
            must be stated.
        modality_tag: free-form source-modality label carried into the
            archive config.
        line_length: target 1D table length (line-mode mappings).
        plane_extent: target 2D plane as (width, height) in pixels
            (grid-mode mappings).
        patch_size: target 2D patch edge in pixels; the PE grid becomes
            ceil(height / patch) x ceil(width / patch).
        first_block: index of the first source block to export.
        n_blocks: how many blocks to export; None means every block
            from first_block onward.
        pool: "cls" or "mean", recorded in the archive config.
    """

    source: str
    mapping: str
    out: str
    n_heads: int
    modality_tag: str = "language"
    line_length: int = 77
    plane_extent: tuple[int, int] = (512, 512)
    patch_size: int = 26
    first_block: int = 0
    n_blocks: int | None = None
    pool: str = "cls"

    def __post_init__(self) -> None:
        w, h = self.plane_extent
        if self.n_heads < 1:
            raise GeometryMismatch(f"n_heads must be >= 1, got {self.n_heads}")
        if self.line_length < 1:
            raise GeometryMismatch(f"line_length must be >= 1, got {self.line_length}")
        if self.patch_size < 1 or w < 1 or h < 1:
            raise GeometryMismatch(
                f"plane {w}x{h} with patch {self.patch_size} is not a valid target"
            )
        if self.first_block < 0:
            raise GeometryMismatch(f"first_block must be >= 0, got {self.first_block}")
        if self.n_blocks is not None and self.n_blocks < 1:
            raise GeometryMismatch(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.pool not in ("cls", "mean"):
            raise GeometryMismatch(f"unknown pool {self.pool!r}")

    def pe_grid(self) -> tuple[int, int]:
        w, h = self.plane_extent
        return (
            int(math.ceil(h / self.patch_size)),
            int(math.ceil(w / self.patch_size)),
        )


@dataclass
class ExportResult:
    """What one export produced, for auditing and round-trip checks.

    Attributes:
        path: where the archive was written.
        meta: the manifest meta section, including the backbone config
            and the pe_resized / cls_synthesized flags.
        tensors: the exact float32 arrays written, in archive order.
    """

    path: str
    meta: dict
    tensors: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def load_mapping(name_or_path: str) -> dict:
    """Load and validate a mapping table.

    Args:
        name_or_path: a bundled family name ("clip_text", "dinov2") or
            a filesystem path to a mapping JSON file.

    Raises:
        MappingError: unknown name, unreadable file, or invalid table.
    """
    if name_or_path.endswith(".json") or os.path.sep in name_or_path:
        try:
            with open(name_or_path, encoding="utf-8") as fh:
                table = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise MappingError(f"cannot read mapping {name_or_path!r}: {exc}") from exc
    else:
        res = resources.files(__package__) / "mappings" / f"{name_or_path}.json"
        if not res.is_file():
            builtin = sorted(
                p.name.removesuffix(".json")
                for p in (resources.files(__package__) / "mappings").iterdir()
                if p.name.endswith(".json")
            )
            raise MappingError(
                f"unknown mapping {name_or_path!r}; bundled tables: {builtin}"
            )
        table = json.loads(res.read_text(encoding="utf-8"))
    _check_mapping(name_or_path, table)
    return table


def _check_mapping(origin: str, table: object) -> None:
    if not isinstance(table, dict):
        raise MappingError(f"{origin}: mapping table must be a JSON object")

    def need(key: str, kind: type) -> object:
        if key not in table or not isinstance(table[key], kind):
            raise MappingError(f"{origin}: mapping needs {key!r} of type {kind.__name__}")
        return table[key]

    need("mapping_version", int)
    need("family", str)
    blocks = need("block_tensors", dict)
    tensors = need("tensors", dict)
    prefix = need("block_prefix", str)
    if "{i}" not in prefix:
        raise MappingError(f"{origin}: block_prefix must contain '{{i}}'")
    if table.get("pe_layout") not in _PE_LAYOUTS:
        raise MappingError(f"{origin}: pe_layout must be one of {_PE_LAYOUTS}")
    if table.get("weight_layout") not in ("out_in", "in_out"):
        raise MappingError(f"{origin}: weight_layout must be 'out_in' or 'in_out'")
    for key in ("pe", "final_norm.w", "final_norm.b"):
        if not isinstance(tensors.get(key), str):
            raise MappingError(f"{origin}: tensors[{key!r}] must name a source key")
    if not (tensors.get("cls") is None or isinstance(tensors.get("cls"), str)):
        raise MappingError(f"{origin}: tensors['cls'] must be a source key or null")
    fused = all(k in blocks for k in _BLOCK_KEYS_FUSED)
    split = all(k in blocks for k in _BLOCK_KEYS_SPLIT)
    if fused == split:
        raise MappingError(
            f"{origin}: block_tensors must map either 'attn.qkv.w' or all of"
            f" {list(_BLOCK_KEYS_SPLIT)}, not both or neither"
        )
    for key in _BLOCK_KEYS_COMMON:
        if key not in blocks:
            raise MappingError(f"{origin}: block_tensors lacks {key!r}")


def load_source(path: str) -> dict[str, np.ndarray]:
    """Read a source checkpoint into a flat name -> float32 array dict.

    Understands torch serialization (.pt/.pth/.bin and friends) and
    numpy .npz archives. Common single-key containers ("state_dict",
    "model") are unwrapped; non-floating entries are dropped.

    Raises:
        SourceError: unreadable file or no floating-point tensors.
    """
    if not os.path.isfile(path):
        raise SourceError(f"source checkpoint not found: {path}")
    if path.endswith(".npz"):
        try:
            with np.load(path) as npz:
                raw = {name: np.asarray(npz[name]) for name in npz.files}
        except (OSError, ValueError) as exc:
            raise SourceError(f"cannot read {path}: {exc}") from exc
    else:
        try:
            raw = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch wraps failures in several types
            raise SourceError(f"cannot read {path}: {exc}") from exc
    for container in ("state_dict", "model"):
        if isinstance(raw, dict) and isinstance(raw.get(container), dict):
            raw = raw[container]
    if not isinstance(raw, dict):
        raise SourceError(f"{path}: expected a tensor dict, got {type(raw).__name__}")
    state: dict[str, np.ndarray] = {}
    for name, value in raw.items():
        if isinstance(value, torch.Tensor):
            if not value.is_floating_point():
                continue
            state[name] = value.detach().cpu().to(torch.float32).numpy()
        elif isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
            state[name] = value.astype(np.float32, copy=False)
    if not state:
        raise SourceError(f"{path}: no floating-point tensors found")
    return state


def _fetch(state: dict[str, np.ndarray], key: str) -> np.ndarray:
    if key not in state:
        raise MissingTensor(key)
    return state[key]


def _as_weight(key: str, arr: np.ndarray, layout: str) -> np.ndarray:
    if arr.ndim != 2:
        raise GeometryMismatch(f"{key}: expected a 2D weight, got shape {list(arr.shape)}")
    return np.ascontiguousarray(arr.T) if layout == "out_in" else arr


def _vector(key: str, arr: np.ndarray, length: int, what: str) -> np.ndarray:
    arr = np.squeeze(arr)
    if arr.shape != (length,):
        raise GeometryMismatch(
            f"{key}: {what} must have shape ({length},), got {list(arr.shape)}"
        )
    return arr


def _count_blocks(state: dict[str, np.ndarray], mapping: dict) -> int:
    probe = mapping["block_tensors"]["ln1.w"]
    i = 0
    while mapping["block_prefix"].format(i=i) + probe in state:
        i += 1
    return i


def _block_tensors(
    state: dict[str, np.ndarray],
    mapping: dict,
    src_idx: int,
    dst_idx: int,
    dim: int,
) -> tuple[dict[str, np.ndarray], int]:
    """Convert one source block; returns (tensors, ffn width)."""
    prefix = mapping["block_prefix"].format(i=src_idx)
    layout = mapping["weight_layout"]
    table = mapping["block_tensors"]

    def src(suffix: str) -> np.ndarray:
        return _fetch(state, prefix + table[suffix])

    def bias(suffix: str, length: int) -> np.ndarray:
        # Canonical biases not named by the mapping are synthesized as zeros.
        if suffix not in table:
            return np.zeros(length, dtype=np.float32)
        return _vector(prefix + table[suffix], src(suffix), length, "bias")

    out: dict[str, np.ndarray] = {}
    p = f"blocks.{dst_idx}"
    for ln in ("ln1", "ln2"):
        out[f"{p}.{ln}.w"] = _vector(prefix + table[f"{ln}.w"], src(f"{ln}.w"), dim, "norm scale")
        out[f"{p}.{ln}.b"] = bias(f"{ln}.b", dim)

    if "attn.qkv.w" in table:
        key = prefix + table["attn.qkv.w"]
        fused = _as_weight(key, src("attn.qkv.w"), layout)
        # After transposition to (in, out) the fused projection is (D, 3D)
        # with q, k, v stacked along the output axis in that order.
        if fused.shape != (dim, 3 * dim):
            raise GeometryMismatch(
                f"{key}: fused qkv must hold shape ({3 * dim}, {dim}) in"
                f" (out, in) layout, got {list(src('attn.qkv.w').shape)}"
            )
        fused_b = bias("attn.qkv.b", 3 * dim)
        for j, proj in enumerate(("q", "k", "v")):
            out[f"{p}.attn.{proj}.w"] = np.ascontiguousarray(
                fused[:, j * dim : (j + 1) * dim]
            )
            out[f"{p}.attn.{proj}.b"] = fused_b[j * dim : (j + 1) * dim]
    else:
        for proj in ("q", "k", "v"):
            key = prefix + table[f"attn.{proj}.w"]
            w = _as_weight(key, src(f"attn.{proj}.w"), layout)
            if w.shape != (dim, dim):
                raise GeometryMismatch(
                    f"{key}: {proj} projection must be ({dim}, {dim}), got {list(w.shape)}"
                )
            out[f"{p}.attn.{proj}.w"] = w
            out[f"{p}.attn.{proj}.b"] = bias(f"attn.{proj}.b", dim)

    key = prefix + table["attn.out.w"]
    w = _as_weight(key, src("attn.out.w"), layout)
    if w.shape != (dim, dim):
        raise GeometryMismatch(f"{key}: out projection must be ({dim}, {dim}), got {list(w.shape)}")
    out[f"{p}.attn.out.w"] = w
    out[f"{p}.attn.out.b"] = bias("attn.out.b", dim)

    key = prefix + table["ffn.fc1.w"]
    fc1 = _as_weight(key, src("ffn.fc1.w"), layout)
    if fc1.shape[0] != dim:
        raise GeometryMismatch(f"{key}: fc1 must consume width {dim}, got {list(fc1.shape)}")
    ffn_dim = fc1.shape[1]
    key = prefix + table["ffn.fc2.w"]
    fc2 = _as_weight(key, src("ffn.fc2.w"), layout)
    if fc2.shape != (ffn_dim, dim):
        raise GeometryMismatch(
            f"{key}: fc2 must be ({ffn_dim}, {dim}) to invert fc1, got {list(fc2.shape)}"
        )
    out[f"{p}.ffn.fc1.w"] = fc1
    out[f"{p}.ffn.fc1.b"] = bias("ffn.fc1.b", ffn_dim)
    out[f"{p}.ffn.fc2.w"] = fc2
    out[f"{p}.ffn.fc2.b"] = bias("ffn.fc2.b", dim)
    # Reorder to the canonical registry sequence for deterministic output.
    order = [f"{p}.ln1.w", f"{p}.ln1.b"]
    order += [f"{p}.attn.{q}.{s}" for q in ("q", "k", "v", "out") for s in ("w", "b")]
    order += [f"{p}.ln2.w", f"{p}.ln2.b"]
    order += [f"{p}.ffn.{fc}.{s}" for fc in ("fc1", "fc2") for s in ("w", "b")]
    return {name: out[name] for name in order}, ffn_dim


def resize_grid_bilinear(table: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinearly resample a (Gh, Gw, D) table to (rows, cols, D).

    Uses the standard align_corners=False convention, the same one used
    to adapt vision-transformer position tables to new grid sizes.
    Output cells are convex combinations of input cells, so up to
    float32 rounding a constant table stays constant and values never
    leave the input range.
    """
    t = torch.from_numpy(np.ascontiguousarray(table, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = torch.nn.functional.interpolate(
        t, size=(rows, cols), mode="bilinear", align_corners=False
    )
    return t.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def _pe_table(
    state: dict[str, np.ndarray], mapping: dict, spec: ExportSpec, dim: int
) -> tuple[np.ndarray, bool]:
    """Extract the positional table; returns (table, resized flag)."""
    key = mapping["tensors"]["pe"]
    arr = np.squeeze(_fetch(state, key))
    layout = mapping["pe_layout"]
    if arr.ndim != 2 and not (layout == "grid" and arr.ndim == 3):
        raise GeometryMismatch(f"{key}: cannot interpret shape {list(arr.shape)} as a PE table")
    if arr.shape[-1] != dim:
        raise GeometryMismatch(f"{key}: PE width {arr.shape[-1]} != model width {dim}")
    if layout == "line":
        # 1D tables are never resampled: sequence positions are not a
        # metric grid, so a length mismatch is a hard error.
        if arr.shape[0] != spec.line_length:
            raise GeometryMismatch(
                f"{key}: source table has {arr.shape[0]} positions, target"
                f" line_length is {spec.line_length}"
            )
        return arr, False
    if layout == "grid_with_cls":
        arr = arr[1:]
    if arr.ndim == 2:
        side = math.isqrt(arr.shape[0])
        if side * side != arr.shape[0]:
            raise GeometryMismatch(
                f"{key}: {arr.shape[0]} grid positions do not form a square grid"
            )
        arr = arr.reshape(side, side, dim)
    rows, cols = spec.pe_grid()
    if arr.shape[:2] == (rows, cols):
        return arr, False
    return resize_grid_bilinear(arr, rows, cols), True


def export(spec: ExportSpec) -> ExportResult:
    """Convert one source checkpoint into a portable archive.

    Reads ``spec.source``, resolves every canonical tensor through the
    mapping table, reshapes the positional table to the target
    geometry, and writes the archive to ``spec.out``.

    Raises:
        SourceError: unreadable source checkpoint.
        MappingError: unknown or invalid mapping table.
        MissingTensor: a mapped source key is absent, naming the key.
        GeometryMismatch: source shapes contradict each other or the
            requested target geometry.
    """
    mapping = load_mapping(spec.mapping)
    state = load_source(spec.source)

    # The final norm scale is present in every family and is the one
    # unambiguous 1D tensor of length D, so it anchors the model width.
    norm_key = mapping["tensors"]["final_norm.w"]
    norm_arr = np.squeeze(_fetch(state, norm_key))
    if norm_arr.ndim != 1 or norm_arr.shape[0] < 1:
        raise GeometryMismatch(
            f"{norm_key}: final norm scale must be a vector, got shape {list(norm_arr.shape)}"
        )
    dim = int(norm_arr.shape[0])
    if dim % spec.n_heads != 0:
        raise GeometryMismatch(
            f"model width {dim} is not a multiple of n_heads {spec.n_heads}"
        )
    final_w = norm_arr
    final_b = _vector(
        mapping["tensors"]["final_norm.b"],
        _fetch(state, mapping["tensors"]["final_norm.b"]),
        dim,
        "norm bias",
    )

    available = _count_blocks(state, mapping)
    n_blocks = spec.n_blocks if spec.n_blocks is not None else available - spec.first_block
    if n_blocks < 1 or spec.first_block + n_blocks > available:
        missing_idx = max(spec.first_block, available)
        probe = mapping["block_prefix"].format(i=missing_idx) + mapping["block_tensors"]["ln1.w"]
        raise MissingTensor(
            probe,
            f"blocks [{spec.first_block}, {spec.first_block + max(n_blocks, 0)}) requested,"
            f" source has {available}",
        )

    pe, pe_resized = _pe_table(state, mapping, spec, dim)

    cls_key = mapping["tensors"]["cls"]
    if cls_key is None:
        cls = np.zeros(dim, dtype=np.float32)
        cls_synthesized = True
    else:
        cls = _vector(cls_key, _fetch(state, cls_key), dim, "cls token")
        cls_synthesized = False

    tensors: dict[str, np.ndarray] = {"cls.token": cls, "pe.table": pe}
    ffn_dim: int | None = None
    for dst_idx in range(n_blocks):
        block, block_ffn = _block_tensors(
            state, mapping, spec.first_block + dst_idx, dst_idx, dim
        )
        if ffn_dim is None:
            ffn_dim = block_ffn
        elif block_ffn != ffn_dim:
            raise GeometryMismatch(
                f"block {spec.first_block + dst_idx} has FFN width {block_ffn},"
                f" earlier blocks have {ffn_dim}"
            )
        tensors.update(block)
    tensors["final_norm.w"] = final_w
    tensors["final_norm.b"] = final_b
    tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in tensors.items()}

    pe_mode = LINE1D if mapping["pe_layout"] == "line" else PLANE2D
    meta = {
        "config": {
            "n_blocks": n_blocks,
            "dim": dim,
            "n_heads": spec.n_heads,
            "ffn_dim": ffn_dim,
            "pe_mode": pe_mode,
            "line_length": spec.line_length,
            "plane_extent": list(spec.plane_extent),
            "patch_size": spec.patch_size,
            "pool": spec.pool,
            "modality_tag": spec.modality_tag,
        },
        "source_family": mapping["family"],
        "mapping_version": mapping["mapping_version"],
        "source_blocks": [spec.first_block, spec.first_block + n_blocks],
        "pe_resized": pe_resized,
        "cls_synthesized": cls_synthesized,
    }
    archive.write_archive(spec.out, meta, tensors)
    return ExportResult(spec.out, meta, tensors)
