"""Frozen pre-norm transformer backbone with optional guided adapters.

The backbone is a standard pre-norm encoder (multi-head self-attention
and GELU FFN, both residual) whose weights are never trained here: they
come from a portable checkpoint or a deterministic random init used at
desk scale. A learnable-elsewhere cls token is prepended; point tokens
carry source-modality positional encodings applied upstream. Adapters,
when provided, act on the point tokens only (the cls row has no 3D
coordinates to group by) in blocks below the configured insertion
depth, at a configurable position relative to the FFN.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .adapter import AdapterConfig, AdapterState, adapter_update_batch, group_keys_all_views, voxel_keys
from .encodings import sinusoid_table_1d, sinusoid_table_2d
from .errors import ConfigMismatch, DimMismatch, ManifestError, MissingTensor, ShapeError
from .projection import LINE1D, PLANE2D, PETable, ProjectedPositions
from .tokenizer import TokenSet

LN_EPS = 1e-5


@dataclass
class BackboneConfig:
    """Architecture and source-geometry description of a frozen backbone.

    Attributes:
        n_blocks: transformer depth.
        dim: model width D.
        n_heads: attention heads; must divide dim.
        ffn_dim: FFN hidden width; defaults to 4 * dim.
        pe_mode: LINE1D or PLANE2D positional-table layout.
        line_length: 1D table length.
        plane_extent: (width, height) in pixels for 2D tables.
        patch_size: 2D patch edge in pixels.
        pool: "cls" returns the cls feature, "mean" the token average.
        modality_tag: free-form source label carried into checkpoints.
    """

    n_blocks: int = 12
    dim: int = 768
    n_heads: int = 12
    ffn_dim: int | None = None
    pe_mode: str = LINE1D
    line_length: int = 77
    plane_extent: tuple[int, int] = (512, 512)
    patch_size: int = 26
    pool: str = "cls"
    modality_tag: str = "synthetic"

    def __post_init__(self) -> None:
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.dim
        if self.n_blocks < 1:
            raise ConfigMismatch(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.dim < 1 or self.dim % self.n_heads != 0:
            raise ConfigMismatch(
                f"dim {self.dim} must be a positive multiple of n_heads {self.n_heads}"
            )
        if self.pe_mode not in (LINE1D, PLANE2D):
            raise ConfigMismatch(f"unknown pe_mode {self.pe_mode!r}")
        if self.pool not in ("cls", "mean"):
            raise ConfigMismatch(f"unknown pool {self.pool!r}")

    def pe_grid(self) -> tuple[int, int]:
        """(rows, cols) of the 2D PE grid under ceil division."""
        w, h = self.plane_extent
        return (
            int(math.ceil(h / self.patch_size)),
            int(math.ceil(w / self.patch_size)),
        )


def tensor_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor registry for a config; weights are (in, out)."""
    d, f = cfg.dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"cls.token": (d,)}
    if cfg.pe_mode == LINE1D:
        shapes["pe.table"] = (cfg.line_length, d)
    else:
        gh, gw = cfg.pe_grid()
        shapes["pe.table"] = (gh, gw, d)
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        shapes[f"{p}.ln1.w"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{proj}.w"] = (d, d)
            shapes[f"{p}.attn.{proj}.b"] = (d,)
        shapes[f"{p}.ln2.w"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ffn.fc1.w"] = (d, f)
        shapes[f"{p}.ffn.fc1.b"] = (f,)
        shapes[f"{p}.ffn.fc2.w"] = (f, d)
        shapes[f"{p}.ffn.fc2.b"] = (d,)
    shapes["final_norm.w"] = (d,)
    shapes["final_norm.b"] = (d,)
    return shapes


@dataclass
class BackboneBundle:
    """Frozen weights plus the positional table they were trained with.

    Attributes:
        cfg: architecture description.
        tensors: name -> tensor, exactly the tensor_shapes registry.
        pe: positional table view over tensors["pe.table"].
        meta: provenance carried through checkpoints.
        frozen: always True here; training never updates these tensors.
    """

    cfg: BackboneConfig
    tensors: dict[str, torch.Tensor]
    pe: PETable
    meta: dict = field(default_factory=dict)
    frozen: bool = True

    def weights_sha256(self) -> str:
        """Digest over every tensor (sorted by name) for freeze checks."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(
                np.ascontiguousarray(
                    self.tensors[name].detach().cpu().numpy()
                ).tobytes()
            )
        return h.hexdigest()


def _make_pe_table(cfg: BackboneConfig, data: torch.Tensor) -> PETable:
    if cfg.pe_mode == LINE1D:
        return PETable(LINE1D, data)
    return PETable(PLANE2D, data, patch_size=cfg.patch_size)


def init_random_backbone(
    cfg: BackboneConfig, seed: int, dtype: torch.dtype = torch.float32
) -> BackboneBundle:
    """Deterministic random backbone with a sinusoidal positional table.

    Weight matrices draw from U(-1/sqrt(fan_in), +1/sqrt(fan_in)); norm
    scales start at one, every bias at zero. The same seed always
    produces a bit-identical bundle.
    """
    gen = torch.Generator().manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in tensor_shapes(cfg).items():
        if name == "pe.table":
            if cfg.pe_mode == LINE1D:
                data = sinusoid_table_1d(cfg.line_length, cfg.dim)
            else:
                gh, gw = cfg.pe_grid()
                data = sinusoid_table_2d(gh, gw, cfg.dim)
            tensors[name] = data.to(dtype)
        elif name.endswith(("ln1.w", "ln2.w", "final_norm.w")):
            tensors[name] = torch.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            tensors[name] = torch.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            t = torch.zeros(shape, dtype=dtype)
            t.uniform_(-bound, bound, generator=gen)
            tensors[name] = t
    pe = _make_pe_table(cfg, tensors["pe.table"])
    meta = {"source": "random-init", "seed": seed, "modality": cfg.modality_tag}
    return BackboneBundle(cfg, tensors, pe, meta)


def _ln(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), w, b, LN_EPS)


def _attention_probs(
    x: torch.Tensor, tensors: dict[str, torch.Tensor], prefix: str, n_heads: int
) -> torch.Tensor:
    """Softmax attention probabilities, (..., heads, T, T)."""
    t, d = x.shape[-2], x.shape[-1]
    hd = d // n_heads
    q = x @ tensors[f"{prefix}.q.w"] + tensors[f"{prefix}.q.b"]
    k = x @ tensors[f"{prefix}.k.w"] + tensors[f"{prefix}.k.b"]
    q = q.reshape(*x.shape[:-2], t, n_heads, hd).transpose(-3, -2)
    k = k.reshape(*x.shape[:-2], t, n_heads, hd).transpose(-3, -2)
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)


def _mhsa(
    x: torch.Tensor, tensors: dict[str, torch.Tensor], prefix: str, n_heads: int
) -> torch.Tensor:
    t, d = x.shape[-2], x.shape[-1]
    hd = d // n_heads
    probs = _attention_probs(x, tensors, prefix, n_heads)
    v = x @ tensors[f"{prefix}.v.w"] + tensors[f"{prefix}.v.b"]
    v = v.reshape(*x.shape[:-2], t, n_heads, hd).transpose(-3, -2)
    y = (probs @ v).transpose(-3, -2).reshape(*x.shape[:-2], t, d)
    return y @ tensors[f"{prefix}.out.w"] + tensors[f"{prefix}.out.b"]


def _ffn(x: torch.Tensor, tensors: dict[str, torch.Tensor], prefix: str) -> torch.Tensor:
    h = F.gelu(x @ tensors[f"{prefix}.fc1.w"] + tensors[f"{prefix}.fc1.b"])
    return h @ tensors[f"{prefix}.fc2.w"] + tensors[f"{prefix}.fc2.b"]


def _adapter_keys(
    coords: torch.Tensor,
    positions: ProjectedPositions,
    acfg: AdapterConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Group keys (..., M, N) and voxel keys (..., N) for the batch path."""
    vox = torch.from_numpy(voxel_keys(coords, acfg.grid_size_3d))
    if acfg.grouping == "voxel3d":
        return vox.unsqueeze(-2), vox
    if positions is None:
        raise ConfigMismatch("projected grouping requires positions")
    keys = torch.from_numpy(group_keys_all_views(positions, acfg))
    return keys, vox


def forward(
    bundle: BackboneBundle,
    tokens: TokenSet,
    adapters: AdapterState | None = None,
    positions: ProjectedPositions | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the frozen backbone over PE-carrying point tokens.

    Args:
        bundle: frozen weights.
        tokens: (..., N, D) features with positional encodings already
            added, plus (..., N, 3) coordinates for adapter grouping.
        adapters: optional adapter weights; applied to point tokens in
            blocks below the insertion depth at the configured position.
        positions: projected positions, required for projected grouping.

    Returns:
        (token features (..., N, D), summary feature (..., D)); the
        summary is the cls row or the token mean per cfg.pool.
    """
    cfg = bundle.cfg
    x = tokens.features
    if x.shape[-1] != cfg.dim:
        raise DimMismatch(f"token dim {x.shape[-1]} != backbone dim {cfg.dim}")
    tensors = bundle.tensors
    x = x.to(tensors["cls.token"].dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    coords = tokens.coords
    if isinstance(coords, torch.Tensor) and coords.ndim == 2:
        coords = coords.unsqueeze(0)

    use_adapters = adapters is not None and adapters.insertion_depth > 0
    if use_adapters:
        acfg = adapters.cfg
        if squeeze and positions is not None and acfg.grouping != "voxel3d":
            positions = ProjectedPositions(
                positions.mode, positions.values[None], positions.pe_index[None]
            )
        group_keys, vox_keys = _adapter_keys(coords, positions, acfg)

    cls_row = tensors["cls.token"].expand(*x.shape[:-2], 1, cfg.dim)
    x = torch.cat([cls_row, x], dim=-2)

    def adapted(points: torch.Tensor, block_idx: int) -> torch.Tensor:
        return points + adapter_update_batch(
            points, group_keys, vox_keys, acfg, adapters.blocks[block_idx]
        )

    for i in range(cfg.n_blocks):
        p = f"blocks.{i}"
        x = x + _mhsa(_ln(x, tensors[f"{p}.ln1.w"], tensors[f"{p}.ln1.b"]), tensors, f"{p}.attn", cfg.n_heads)
        active = use_adapters and adapters.active_at(i)
        if active and adapters.position == "before":
            x = torch.cat([x[..., :1, :], adapted(x[..., 1:, :], i)], dim=-2)
        ffn_out = _ffn(_ln(x, tensors[f"{p}.ln2.w"], tensors[f"{p}.ln2.b"]), tensors, f"{p}.ffn")
        if active and adapters.position == "parallel":
            pts = x[..., 1:, :]
            update = adapter_update_batch(
                pts, group_keys, vox_keys, acfg, adapters.blocks[i]
            )
            x = x + ffn_out
            x = torch.cat([x[..., :1, :], x[..., 1:, :] + update], dim=-2)
        else:
            x = x + ffn_out
            if active and adapters.position == "after":
                x = torch.cat([x[..., :1, :], adapted(x[..., 1:, :], i)], dim=-2)
    x = _ln(x, tensors["final_norm.w"], tensors["final_norm.b"])
    point_tokens = x[..., 1:, :]
    summary = point_tokens.mean(dim=-2) if cfg.pool == "mean" else x[..., 0, :]
    if squeeze:
        return point_tokens.squeeze(0), summary.squeeze(0)
    return point_tokens, summary


def attention_scores(
    bundle: BackboneBundle, tokens: TokenSet, block: int
) -> torch.Tensor:
    """Head-averaged cls-to-token attention at one block, adapters off.

    Args:
        bundle: frozen weights.
        tokens: (N, D) or (B, N, D) PE-carrying token features.
        block: block index, < n_blocks.

    Returns:
        (..., N) nonnegative scores; together with the excluded cls
        self-score each row sums to 1.
    """
    cfg = bundle.cfg
    if not 0 <= block < cfg.n_blocks:
        raise ConfigMismatch(f"block {block} outside 0..{cfg.n_blocks - 1}")
    tensors = bundle.tensors
    x = tokens.features.to(tensors["cls.token"].dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.unsqueeze(0)
    cls_row = tensors["cls.token"].expand(*x.shape[:-2], 1, cfg.dim)
    x = torch.cat([cls_row, x], dim=-2)
    for i in range(block):
        p = f"blocks.{i}"
        x = x + _mhsa(_ln(x, tensors[f"{p}.ln1.w"], tensors[f"{p}.ln1.b"]), tensors, f"{p}.attn", cfg.n_heads)
        x = x + _ffn(_ln(x, tensors[f"{p}.ln2.w"], tensors[f"{p}.ln2.b"]), tensors, f"{p}.ffn")
    p = f"blocks.{block}"
    probs = _attention_probs(
        _ln(x, tensors[f"{p}.ln1.w"], tensors[f"{p}.ln1.b"]), tensors, f"{p}.attn", cfg.n_heads
    )
    scores = probs.mean(dim=-3)[..., 0, 1:]
    return scores.squeeze(0) if squeeze else scores


def save_checkpoint(bundle: BackboneBundle, path: str) -> None:
    """Write the bundle as a portable archive (directory or .zip)."""
    cfg_dict = asdict(bundle.cfg)
    cfg_dict["plane_extent"] = list(bundle.cfg.plane_extent)
    meta = dict(bundle.meta)
    meta["config"] = cfg_dict
    arrays = {
        name: t.detach().cpu().numpy().astype(np.float32)
        for name, t in bundle.tensors.items()
    }
    ckpt.write_archive(path, meta, arrays)


def load_checkpoint(path: str, dtype: torch.dtype = torch.float32) -> BackboneBundle:
    """Load and validate a portable backbone checkpoint.

    Raises:
        ManifestError: malformed manifest or missing config.
        MissingTensor: registry lacks a tensor the config requires.
        ShapeError: a tensor's shape contradicts the config (named).
        ChecksumError: payload corruption (named).
    """
    meta, arrays = ckpt.read_archive(path)
    cfg_dict = meta.get("config")
    if not isinstance(cfg_dict, dict):
        raise ManifestError("manifest meta lacks a 'config' section")
    try:
        cfg_dict = dict(cfg_dict)
        cfg_dict["plane_extent"] = tuple(cfg_dict.get("plane_extent", (512, 512)))
        cfg = BackboneConfig(**cfg_dict)
    except (TypeError, ConfigMismatch) as exc:
        raise ManifestError(f"bad backbone config in manifest: {exc}") from exc
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in tensor_shapes(cfg).items():
        if name not in arrays:
            raise MissingTensor(f"checkpoint lacks tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != shape:
            raise ShapeError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, config needs {shape}"
            )
        tensors[name] = torch.from_numpy(arr).to(dtype)
    pe = _make_pe_table(cfg, tensors["pe.table"])
    meta_out = {k: v for k, v in meta.items() if k != "config"}
    return BackboneBundle(cfg, tensors, pe, meta_out)
