"""Trainable mini-network turning a point cloud into N feature tokens.

Each downsample stage halves the point count with farthest point
sampling, gathers k nearest neighbors around every surviving center,
encodes neighbors with a linear layer and a smooth rectifier, pools
(max and mean), and merges with the center's own feature through a
second linear layer. A final projection lifts features to the backbone
width. Setting stages=0 yields a parameter-free tokenizer: tokens are
the input points themselves featurized by a fixed 3D sinusoid, which
serves as the linear-probe baseline.

All math runs in torch so the training harness can differentiate
through it. The public tokenize op takes a single PointCloud; the
batched entry point used by training takes a (B, P, 3) tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encodings import sinusoid_3d
from .errors import ConfigMismatch, InvalidCount
from .pointcloud import PointCloud


@dataclass
class TokenizerConfig:
    """Architecture of the point tokenizer.

    Attributes:
        stages: downsample stage count; 0 means the parameter-free
            sinusoid featurizer (tokens_out must equal points_in).
        points_in: required input cloud size.
        tokens_out: token count N; points_in == tokens_out * 2**stages.
        k_neighbors: neighbors gathered per center at every stage.
        dims: channel widths, strictly increasing. For stages >= 1 the
            layout is (embed, stage_1, ..., stage_s, D); for stages == 0
            a single entry (D,).
        bias: whether linear layers carry bias vectors.
    """

    stages: int = 3
    points_in: int = 512
    tokens_out: int = 64
    k_neighbors: int = 8
    dims: tuple[int, ...] = (12, 24, 32, 48, 64)
    bias: bool = True

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        if self.stages < 0:
            raise ConfigMismatch(f"stages must be >= 0, got {self.stages}")
        if self.tokens_out < 1:
            raise InvalidCount(f"tokens_out must be >= 1, got {self.tokens_out}")
        if self.points_in != self.tokens_out * (2**self.stages):
            raise ConfigMismatch(
                f"points_in={self.points_in} != tokens_out * 2^stages ="
                f" {self.tokens_out * 2 ** self.stages}"
            )
        expected_len = 1 if self.stages == 0 else self.stages + 2
        if len(self.dims) != expected_len:
            raise ConfigMismatch(
                f"dims needs {expected_len} entries for {self.stages} stages,"
                f" got {len(self.dims)}"
            )
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigMismatch(f"dims must be strictly increasing, got {self.dims}")
        if self.stages >= 1 and self.k_neighbors > 2 * self.tokens_out:
            raise ConfigMismatch(
                f"k_neighbors={self.k_neighbors} exceeds the smallest stage input"
                f" ({2 * self.tokens_out})"
            )

    @property
    def out_dim(self) -> int:
        return self.dims[-1]


@dataclass
class TokenSet:
    """Tokenizer output: features (..., N, D) and coords (..., N, 3)."""

    features: torch.Tensor
    coords: torch.Tensor


def init_tokenizer_params(
    cfg: TokenizerConfig, seed: int, dtype: torch.dtype = torch.float32
) -> dict[str, torch.Tensor]:
    """Create the named weight dict: U(-1/sqrt(fan_in), +) weights, zero biases."""
    gen = torch.Generator().manual_seed(seed)
    params: dict[str, torch.Tensor] = {}

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        w = torch.empty(fan_in, fan_out, dtype=dtype)
        w.uniform_(-bound, bound, generator=gen)
        params[f"{name}.w"] = w
        if cfg.bias:
            params[f"{name}.b"] = torch.zeros(fan_out, dtype=dtype)

    if cfg.stages == 0:
        return params
    linear("embed", 3, cfg.dims[0])
    for s in range(1, cfg.stages + 1):
        c_in, c_out = cfg.dims[s - 1], cfg.dims[s]
        linear(f"stage{s}.local", c_in + 3, c_out)
        linear(f"stage{s}.merge", c_in + 2 * c_out, c_out)
    linear("proj", cfg.dims[-2], cfg.dims[-1])
    return params


def tokenizer_param_count(cfg: TokenizerConfig) -> int:
    """Exact trainable scalar count of the tokenizer, by construction."""
    if cfg.stages == 0:
        return 0
    count = 0

    def linear(fan_in: int, fan_out: int) -> int:
        return fan_in * fan_out + (fan_out if cfg.bias else 0)

    count += linear(3, cfg.dims[0])
    for s in range(1, cfg.stages + 1):
        c_in, c_out = cfg.dims[s - 1], cfg.dims[s]
        count += linear(c_in + 3, c_out)
        count += linear(c_in + 2 * c_out, c_out)
    count += linear(cfg.dims[-2], cfg.dims[-1])
    return count


def _apply_linear(
    x: torch.Tensor, params: dict[str, torch.Tensor], name: str
) -> torch.Tensor:
    out = x @ params[f"{name}.w"]
    b = params.get(f"{name}.b")
    return out if b is None else out + b


def _fps_batch(points: torch.Tensor, m: int) -> torch.Tensor:
    """Farthest point sampling over a batch, (B, P, 3) -> (B, m) indices.

    Same rule as pointcloud.fps: first pick farthest from the centroid,
    then greedy max-min distance; argmax resolves ties to the lowest
    index on CPU, matching the single-cloud op.
    """
    bsz, n, _ = points.shape
    centroid = points.mean(dim=1, keepdim=True)
    min_d = ((points - centroid) ** 2).sum(dim=2)  # (B, P)
    chosen = torch.empty(bsz, m, dtype=torch.int64)
    batch_ix = torch.arange(bsz)
    pick = min_d.argmax(dim=1)
    chosen[:, 0] = pick
    min_d = ((points - points[batch_ix, pick][:, None, :]) ** 2).sum(dim=2)
    for i in range(1, m):
        pick = min_d.argmax(dim=1)
        chosen[:, i] = pick
        d_new = ((points - points[batch_ix, pick][:, None, :]) ** 2).sum(dim=2)
        min_d = torch.minimum(min_d, d_new)
    return chosen


def _knn_batch(queries: torch.Tensor, reference: torch.Tensor, k: int) -> torch.Tensor:
    """Stable-sorted kNN over a batch, (B, M, 3) x (B, P, 3) -> (B, M, k).

    Ties break toward the lower reference index, matching pointcloud.knn.
    For float32 the (distance, index) order is packed into one int64 key:
    nonnegative IEEE floats sort identically to their bit patterns, so
    topk on the key is exact and much faster than a stable argsort.
    """
    # |q - r|^2 expanded through a matmul; clamp guards tiny negatives
    q2 = (queries * queries).sum(dim=2, keepdim=True)  # (B, M, 1)
    r2 = (reference * reference).sum(dim=2)[:, None, :]  # (B, 1, P)
    d2 = (q2 + r2 - 2.0 * (queries @ reference.transpose(1, 2))).clamp_min_(0)
    n_ref = d2.shape[-1]
    if d2.dtype == torch.float32 and n_ref < (1 << 16):
        bits = d2.contiguous().view(torch.int32).to(torch.int64)
        key = (bits << 16) | torch.arange(n_ref, dtype=torch.int64)
        return torch.topk(key, k, dim=2, largest=False).indices
    order = torch.argsort(d2, dim=2, stable=True)  # stable: ties keep low index
    return order[:, :, :k]


def _gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Gather rows per batch: x (B, P, C), idx (B, ...) -> (B, ..., C)."""
    bsz = x.shape[0]
    flat = idx.reshape(bsz, -1)
    out = torch.gather(x, 1, flat[:, :, None].expand(-1, -1, x.shape[2]))
    return out.reshape(*idx.shape, x.shape[2])


def tokenize_batch(
    points: torch.Tensor, cfg: TokenizerConfig, params: dict[str, torch.Tensor]
) -> TokenSet:
    """Tokenize a (B, P, 3) coordinate tensor. See tokenize for the contract."""
    if points.ndim != 3 or points.shape[2] != 3:
        raise ConfigMismatch(f"expected (B, P, 3) points, got {tuple(points.shape)}")
    if points.shape[1] != cfg.points_in:
        raise ConfigMismatch(
            f"cloud has {points.shape[1]} points, config expects {cfg.points_in}"
        )
    if cfg.stages == 0:
        return TokenSet(sinusoid_3d(points, cfg.out_dim), points)
    feats = _apply_linear(points, params, "embed")
    pts = points
    for s in range(1, cfg.stages + 1):
        m = pts.shape[1] // 2
        centers_idx = _fps_batch(pts, m)
        centers = _gather_rows(pts, centers_idx)
        nbr_idx = _knn_batch(centers, pts, cfg.k_neighbors)
        nbr_f = _gather_rows(feats, nbr_idx)  # (B, m, k, c_in)
        rel = _gather_rows(pts, nbr_idx) - centers[:, :, None, :]
        enc = torch.nn.functional.gelu(
            _apply_linear(torch.cat([nbr_f, rel], dim=3), params, f"stage{s}.local")
        )
        pooled = torch.cat([enc.max(dim=2).values, enc.mean(dim=2)], dim=2)
        center_f = _gather_rows(feats, centers_idx)
        feats = _apply_linear(
            torch.cat([center_f, pooled], dim=2), params, f"stage{s}.merge"
        )
        pts = centers
    return TokenSet(_apply_linear(feats, params, "proj"), pts)


def tokenize(
    cloud: PointCloud, cfg: TokenizerConfig, params: dict[str, torch.Tensor]
) -> TokenSet:
    """Convert one cloud into tokens_out tokens at the backbone width.

    Args:
        cloud: normalized cloud of exactly cfg.points_in points.
        cfg: tokenizer architecture.
        params: named weights from init_tokenizer_params (or trained).

    Returns:
        TokenSet with (N, D) features and (N, 3) coords, where coords are
        the final-stage FPS centers. Deterministic given inputs.

    Raises:
        ConfigMismatch: if the cloud size disagrees with points_in.
    """
    dtype = next(iter(params.values())).dtype if params else torch.float32
    pts = torch.from_numpy(np.asarray(cloud.points)).to(dtype)[None]
    out = tokenize_batch(pts, cfg, params)
    return TokenSet(out.features[0], out.coords[0])
