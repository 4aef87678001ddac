"""Guided adapter: per-view local aggregation, 3D baseline, ensemble.

Inserted after each transformer FFN, the adapter projects tokens down to
a bottleneck width, runs intra-group self-attention per view (groups are
tokens sharing a 1D segment or 2D patch under the virtual projection),
pools and propagates the group feature, forms a non-parametric 3D voxel
baseline from the same bottleneck features, fuses the M view results
with softmax-normalized cosine weights against the baseline, and
projects back up with a residual. The attention projections operate at
the bottleneck width between the pre/post linear maps, which is what
keeps the trainable budget at the reported scale.

Single-sample ops here are the reference implementations; the batched
path used by training is checked against them in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigMismatch
from .projection import LINE1D, PLANE2D, ProjectedPositions

VARIANTS = ("full", "mlp_baseline")
POSITIONS = ("after", "before", "parallel")
GROUPINGS = ("projected", "voxel3d")
ENSEMBLES = ("adaptive", "mean")


@dataclass
class AdapterConfig:
    """Grouping granularity and adapter internals.

    Attributes:
        mode: LINE1D or PLANE2D, inherited from the projection config.
        segment_size: 1D grouping segment width (positions).
        patch_size: 2D grouping patch edge (pixels).
        grid_size_3d: voxel edge of the non-parametric baseline branch.
        variant: "full" (guided aggregation + ensemble) or "mlp_baseline".
        bottleneck_dim: width of the adapter's internal projections.
        ensemble: "adaptive" (softmax cosine weights) or "mean" over views.
        grouping: "projected" (per-view 1D/2D groups) or "voxel3d".
        pooling: "mean" or "max" pooling of attended group features.
        tau: softmax temperature of the adaptive ensemble.
    """

    mode: str = LINE1D
    segment_size: int = 2
    patch_size: int = 26
    grid_size_3d: float = 0.08
    variant: str = "full"
    bottleneck_dim: int = 32
    ensemble: str = "adaptive"
    grouping: str = "projected"
    pooling: str = "mean"
    tau: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in (LINE1D, PLANE2D):
            raise ConfigMismatch(f"unknown adapter mode {self.mode!r}")
        if self.grid_size_3d <= 0:
            raise ConfigMismatch(f"grid_size_3d must be > 0, got {self.grid_size_3d}")
        if self.segment_size < 1 or self.patch_size < 1:
            raise ConfigMismatch("grouping granularity must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigMismatch(f"unknown variant {self.variant!r}")
        if self.bottleneck_dim < 1:
            raise ConfigMismatch("bottleneck_dim must be >= 1")
        if self.ensemble not in ENSEMBLES:
            raise ConfigMismatch(f"unknown ensemble {self.ensemble!r}")
        if self.grouping not in GROUPINGS:
            raise ConfigMismatch(f"unknown grouping {self.grouping!r}")
        if self.pooling not in ("mean", "max"):
            raise ConfigMismatch(f"unknown pooling {self.pooling!r}")


@dataclass
class AdapterState:
    """Trainable adapter weights plus their placement in the backbone.

    Attributes:
        cfg: adapter configuration.
        insertion_depth: adapters live in blocks 0..insertion_depth-1.
        position: "after", "before", or "parallel" relative to the FFN.
        blocks: per-block named weight dicts, length insertion_depth.
    """

    cfg: AdapterConfig
    insertion_depth: int
    position: str = "after"
    blocks: list[dict[str, torch.Tensor]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.position not in POSITIONS:
            raise ConfigMismatch(f"unknown adapter position {self.position!r}")
        if self.insertion_depth < 0:
            raise ConfigMismatch("insertion_depth must be >= 0")

    def active_at(self, block_idx: int) -> bool:
        return block_idx < self.insertion_depth

    def param_count(self) -> int:
        return sum(t.numel() for blk in self.blocks for t in blk.values())


def init_adapter_state(
    cfg: AdapterConfig,
    dim: int,
    insertion_depth: int,
    position: str = "after",
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> AdapterState:
    """Initialize per-block adapter weights.

    Down/attention projections use uniform fan-in init; the up
    projection starts at zero so every adapter begins as the identity.
    """
    gen = torch.Generator().manual_seed(seed)
    a = cfg.bottleneck_dim

    def linear(fan_in: int, fan_out: int, zero: bool = False):
        w = torch.zeros(fan_in, fan_out, dtype=dtype)
        if not zero:
            bound = 1.0 / np.sqrt(fan_in)
            w.uniform_(-bound, bound, generator=gen)
        return w, torch.zeros(fan_out, dtype=dtype)

    blocks = []
    for _ in range(insertion_depth):
        weights: dict[str, torch.Tensor] = {}
        weights["down.w"], weights["down.b"] = linear(dim, a)
        if cfg.variant == "full":
            for name in ("q", "k", "v", "o"):
                weights[f"{name}.w"], weights[f"{name}.b"] = linear(a, a)
        weights["up.w"], weights["up.b"] = linear(a, dim, zero=True)
        blocks.append(weights)
    return AdapterState(cfg, insertion_depth, position, blocks)


def adapter_param_count(cfg: AdapterConfig, dim: int, insertion_depth: int) -> int:
    """Exact trainable scalar count across all inserted adapter blocks."""
    a = cfg.bottleneck_dim
    per_block = (dim * a + a) + (a * dim + dim)
    if cfg.variant == "full":
        per_block += 4 * (a * a + a)
    return per_block * insertion_depth


def group_keys_for_view(
    positions: ProjectedPositions, j: int, cfg: AdapterConfig
) -> np.ndarray:
    """Integer group key per token for view j, (N,) or (B, N)."""
    if positions.mode == LINE1D:
        pos = positions.values[..., j, :]
        return (pos // cfg.segment_size).astype(np.int64)
    uv = positions.values[..., j, :, :]
    ku = (uv[..., 0] // cfg.patch_size).astype(np.int64)
    kv = (uv[..., 1] // cfg.patch_size).astype(np.int64)
    # composite key; kv is bounded by the plane extent so this is injective
    return ku * (kv.max() + 1 if kv.size else 1) + kv


def group_keys_all_views(
    positions: ProjectedPositions, cfg: AdapterConfig
) -> np.ndarray:
    """Integer group keys for every view at once, (..., M, N)."""
    if positions.mode == LINE1D:
        return (positions.values // cfg.segment_size).astype(np.int64)
    ku = (positions.values[..., 0] // cfg.patch_size).astype(np.int64)
    kv = (positions.values[..., 1] // cfg.patch_size).astype(np.int64)
    span = int(kv.max()) + 1 if kv.size else 1
    return ku * span + kv


def group_tokens(
    positions: ProjectedPositions, j: int, cfg: AdapterConfig
) -> list[np.ndarray]:
    """Partition token indices of view j by grouping key.

    2D key: (floor(u/patch_size), floor(v/patch_size)); 1D key:
    floor(position/segment_size). Groups come out sorted by key, indices
    ascending inside each group; together they cover all N tokens.
    """
    if positions.values.ndim > (2 if positions.mode == LINE1D else 3):
        raise ConfigMismatch("group_tokens expects single-sample positions")
    if positions.mode == LINE1D:
        keys = [(int(k),) for k in positions.values[j] // cfg.segment_size]
    else:
        uv = positions.values[j]
        keys = [
            (int(u // cfg.patch_size), int(v // cfg.patch_size)) for u, v in uv
        ]
    buckets: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        buckets.setdefault(key, []).append(i)
    return [np.array(buckets[k], dtype=np.int64) for k in sorted(buckets)]


def local_aggregate(
    features: torch.Tensor,
    partition: list[np.ndarray],
    weights: dict[str, torch.Tensor],
    pooling: str = "mean",
) -> torch.Tensor:
    """Intra-group self-attention, pooling, and additive propagation.

    Args:
        features: (N, a) tokens at the adapter width.
        partition: disjoint index groups covering all N tokens.
        weights: q/k/v/o projection weights at width a.
        pooling: "mean" or "max" over attended features per group.

    Returns:
        (N, a) tensor: attended feature + pooled group feature per token.
    """
    out = torch.zeros_like(features)
    scale = 1.0 / np.sqrt(features.shape[-1])
    for group in partition:
        f = features[torch.as_tensor(group)]
        q = f @ weights["q.w"] + weights["q.b"]
        k = f @ weights["k.w"] + weights["k.b"]
        v = f @ weights["v.w"] + weights["v.b"]
        attn = torch.softmax(q @ k.T * scale, dim=-1)
        y = (attn @ v) @ weights["o.w"] + weights["o.b"]
        pooled = y.max(dim=0).values if pooling == "max" else y.mean(dim=0)
        out[torch.as_tensor(group)] = y + pooled
    return out


def voxel_keys(coords: np.ndarray | torch.Tensor, grid_size: float) -> np.ndarray:
    """Composite integer voxel key per token, (..., N).

    Coordinates are offset by +1 before flooring so unit-sphere inputs
    produce nonnegative per-axis keys.
    """
    c = coords.detach().cpu().numpy() if isinstance(coords, torch.Tensor) else coords
    k = np.floor((np.asarray(c, dtype=np.float64) + 1.0) / grid_size).astype(np.int64)
    k = k - k.min() if k.size else k
    span = int(k.max()) + 1 if k.size else 1
    return (k[..., 0] * span + k[..., 1]) * span + k[..., 2]


def _segment_mean(values: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Mean of rows sharing a key, broadcast back: (..., N, a) -> same.

    Keys are compared within each leading index only.
    """
    lead_shape = values.shape[:-2]
    n, a = values.shape[-2], values.shape[-1]
    flat_v = values.reshape(-1, n, a)
    flat_k = keys.reshape(-1, n)
    rows = flat_k.shape[0]
    flat_k = flat_k - flat_k.min()
    span = int(flat_k.max()) + 1
    combined = (flat_k + torch.arange(rows, dtype=torch.int64)[:, None] * span).reshape(-1)
    _, inv = torch.unique(combined, return_inverse=True)
    groups = int(inv.max()) + 1
    sums = torch.zeros(groups, a, dtype=values.dtype).index_add_(
        0, inv, flat_v.reshape(-1, a)
    )
    counts = torch.zeros(groups, dtype=values.dtype).index_add_(
        0, inv, torch.ones(rows * n, dtype=values.dtype)
    )
    means = sums / counts[:, None]
    return means[inv].reshape(*lead_shape, n, a)


def baseline_branch(
    coords: np.ndarray | torch.Tensor,
    features: torch.Tensor,
    grid_size_3d: float,
) -> torch.Tensor:
    """Non-parametric 3D baseline: B_i = mean feature of token i's voxel.

    Args:
        coords: (..., N, 3) token coordinates (nominally in the unit sphere).
        features: (..., N, a) features to pool.
        grid_size_3d: voxel edge.

    Returns:
        (..., N, a) baseline features; touches no trainable parameters.
    """
    keys = torch.from_numpy(voxel_keys(coords, grid_size_3d))
    return _segment_mean(features, keys)


def ensemble_weights(
    baseline: torch.Tensor, views: torch.Tensor, tau: float = 1.0
) -> torch.Tensor:
    """Softmax-over-views of cosine(baseline, view feature) / tau.

    Args:
        baseline: (..., N, a).
        views: (..., M, N, a).
        tau: temperature.

    Returns:
        (..., M, N) nonnegative weights summing to 1 over the view axis.
        A zero-norm baseline or view feature contributes similarity 0.
    """
    b = baseline.unsqueeze(-3)
    dot = (views * b).sum(dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    nv = torch.linalg.vector_norm(views, dim=-1)
    sim = dot / (nb * nv).clamp_min(1e-24)
    sim = torch.where((nb < 1e-12) | (nv < 1e-12), torch.zeros_like(sim), sim)
    return torch.softmax(sim / tau, dim=-2)


def adaptive_ensemble(
    baseline: torch.Tensor, views: torch.Tensor, tau: float = 1.0
) -> torch.Tensor:
    """Fuse per-view features with baseline-guided softmax cosine weights.

    Args:
        baseline: (..., N, a) guidance features B.
        views: (..., M, N, a) per-view features F_j.
        tau: temperature.

    Returns:
        (..., N, a) convex combination of the view features per token.
    """
    w = ensemble_weights(baseline, views, tau)
    return (views * w.unsqueeze(-1)).sum(dim=-3)



def _adapter_update_single(
    features: torch.Tensor,
    coords: np.ndarray,
    positions: ProjectedPositions,
    cfg: AdapterConfig,
    weights: dict[str, torch.Tensor],
) -> torch.Tensor:
    """Additive adapter update (before the residual) for one sample."""
    h = features @ weights["down.w"] + weights["down.b"]
    if cfg.variant == "mlp_baseline":
        return torch.nn.functional.gelu(h) @ weights["up.w"] + weights["up.b"]
    if cfg.grouping == "voxel3d":
        partitions = [_voxel_partition(coords, cfg.grid_size_3d)]
    else:
        m = positions.values.shape[0]
        partitions = [group_tokens(positions, j, cfg) for j in range(m)]
    view_feats = torch.stack(
        [local_aggregate(h, part, weights, cfg.pooling) for part in partitions]
    )
    base = baseline_branch(coords, h, cfg.grid_size_3d)
    if cfg.ensemble == "mean":
        fused = view_feats.mean(dim=0)
    else:
        fused = adaptive_ensemble(base, view_feats, cfg.tau)
    return fused @ weights["up.w"] + weights["up.b"]


def _voxel_partition(coords: np.ndarray, grid_size: float) -> list[np.ndarray]:
    keys = voxel_keys(np.asarray(coords), grid_size)
    buckets: dict[int, list[int]] = {}
    for i, key in enumerate(keys):
        buckets.setdefault(int(key), []).append(i)
    return [np.array(buckets[k], dtype=np.int64) for k in sorted(buckets)]


def adapter_forward(
    features: torch.Tensor,
    coords: np.ndarray | torch.Tensor,
    positions: ProjectedPositions,
    cfg: AdapterConfig,
    state: AdapterState,
    block: int = 0,
) -> torch.Tensor:
    """Run one adapter block on (N, D) features and add the residual.

    Args:
        features: (N, D) point-token features (no cls row).
        coords: (N, 3) token coordinates.
        positions: projected positions for all M views of this sample.
        cfg: adapter configuration.
        state: adapter weights; state.blocks[block] is used.
        block: block index into the state.

    Returns:
        (N, D) adapted features: input + up-projected update.
    """
    c = coords.detach().cpu().numpy() if isinstance(coords, torch.Tensor) else coords
    update = _adapter_update_single(
        features, np.asarray(c), positions, cfg, state.blocks[block]
    )
    return features + update


def adapter_update_batch(
    features: torch.Tensor,
    group_keys: torch.Tensor,
    vox_keys: torch.Tensor,
    cfg: AdapterConfig,
    weights: dict[str, torch.Tensor],
) -> torch.Tensor:
    """Batched additive adapter update.

    Args:
        features: (B, N, D) point-token features.
        group_keys: (B, M, N) int64 per-view group keys (precomputed;
            a single voxel "view" when cfg.grouping is voxel3d).
        vox_keys: (B, N) int64 voxel keys for the baseline branch.
        cfg: adapter configuration.
        weights: one block's weight dict.

    Returns:
        (B, N, D) update to add onto the features.
    """
    h = features @ weights["down.w"] + weights["down.b"]  # (B, N, a)
    if cfg.variant == "mlp_baseline":
        return torch.nn.functional.gelu(h) @ weights["up.w"] + weights["up.b"]
    a = h.shape[-1]
    q = h @ weights["q.w"] + weights["q.b"]
    k = h @ weights["k.w"] + weights["k.b"]
    v = h @ weights["v.w"] + weights["v.b"]
    scores = (q @ k.transpose(-1, -2)) / np.sqrt(a)  # (B, N, N)
    mask = group_keys.unsqueeze(-1) == group_keys.unsqueeze(-2)  # (B, M, N, N)
    masked = scores.unsqueeze(1).masked_fill(~mask, float("-inf"))
    attn = torch.softmax(masked, dim=-1)
    m_views = group_keys.shape[1]
    ctx = attn @ v.unsqueeze(1).expand(-1, m_views, -1, -1)  # (B, M, N, a)
    y = ctx @ weights["o.w"] + weights["o.b"]
    if cfg.pooling == "max":
        pooled = _segment_max(y, group_keys)
    else:
        pooled = _segment_mean(y, group_keys)
    view_feats = y + pooled  # (B, M, N, a)
    if cfg.ensemble == "mean":
        fused = view_feats.mean(dim=1)
    else:
        base = _segment_mean(h, vox_keys)  # (B, N, a)
        fused = adaptive_ensemble(base, view_feats, cfg.tau)
    return fused @ weights["up.w"] + weights["up.b"]


def _segment_max(values: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Max counterpart of _segment_mean (loop-free via sort is overkill here)."""
    lead_shape = values.shape[:-2]
    n, a = values.shape[-2], values.shape[-1]
    flat_v = values.reshape(-1, n, a)
    flat_k = keys.reshape(-1, n)
    rows = flat_k.shape[0]
    flat_k = flat_k - flat_k.min()
    span = int(flat_k.max()) + 1
    combined = (flat_k + torch.arange(rows, dtype=torch.int64)[:, None] * span).reshape(-1)
    _, inv = torch.unique(combined, return_inverse=True)
    groups = int(inv.max()) + 1
    maxes = torch.full((groups, a), -torch.inf, dtype=values.dtype)
    maxes.scatter_reduce_(0, inv[:, None].expand(-1, a), flat_v.reshape(-1, a), reduce="amax")
    return maxes[inv].reshape(*lead_shape, n, a)


def similarity_dump(
    cls_feature: torch.Tensor | np.ndarray,
    token_features: torch.Tensor | np.ndarray,
    k_clusters: int,
) -> np.ndarray:
    """Cluster cls-to-token cosine similarities with exact 1D k-means.

    The clustering is the optimal contiguous partition of the sorted
    similarity values (dynamic program over distinct values), so it is
    deterministic and achieves the global minimum within-cluster
    variance. Labels are numbered by ascending similarity.

    Args:
        cls_feature: (D,) cls vector.
        token_features: (N, D) token features.
        k_clusters: requested cluster count, >= 1; duplicates may merge.

    Returns:
        (N,) int64 labels in [0, k_effective).
    """
    if k_clusters < 1:
        raise ConfigMismatch("k_clusters must be >= 1")
    cls_np = np.asarray(
        cls_feature.detach().cpu().numpy()
        if isinstance(cls_feature, torch.Tensor)
        else cls_feature,
        dtype=np.float64,
    )
    tok_np = np.asarray(
        token_features.detach().cpu().numpy()
        if isinstance(token_features, torch.Tensor)
        else token_features,
        dtype=np.float64,
    )
    denom = np.linalg.norm(tok_np, axis=1) * np.linalg.norm(cls_np)
    sims = np.where(denom < 1e-12, 0.0, tok_np @ cls_np / np.maximum(denom, 1e-24))
    labels_by_value = _kmeans_1d_exact(sims, k_clusters)
    return labels_by_value


def _kmeans_1d_exact(values: np.ndarray, k: int) -> np.ndarray:
    """Optimal 1D k-means by DP over sorted distinct values."""
    distinct, inverse, counts = np.unique(
        values, return_inverse=True, return_counts=True
    )
    m = distinct.shape[0]
    k_eff = min(k, m)
    # prefix sums weighted by multiplicity for interval costs
    w = counts.astype(np.float64)
    s1 = np.concatenate([[0.0], np.cumsum(w * distinct)])
    s2 = np.concatenate([[0.0], np.cumsum(w * distinct**2)])
    cnt = np.concatenate([[0.0], np.cumsum(w)])

    def cost(i: int, j: int) -> float:
        # sum of squared deviations of values[i:j] (by distinct index)
        n = cnt[j] - cnt[i]
        s = s1[j] - s1[i]
        return (s2[j] - s2[i]) - s * s / n

    best = np.full((k_eff + 1, m + 1), np.inf)
    split = np.zeros((k_eff + 1, m + 1), dtype=np.int64)
    best[0, 0] = 0.0
    for c in range(1, k_eff + 1):
        for j in range(c, m + 1):
            for i in range(c - 1, j):
                cand = best[c - 1, i] + cost(i, j)
                if cand < best[c, j]:
                    best[c, j] = cand
                    split[c, j] = i
    bounds = [m]
    for c in range(k_eff, 0, -1):
        bounds.append(int(split[c, bounds[-1]]))
    bounds = bounds[::-1]  # 0 = bounds[0] < ... < bounds[k_eff] = m
    label_of_distinct = np.zeros(m, dtype=np.int64)
    for c in range(k_eff):
        label_of_distinct[bounds[c] : bounds[c + 1]] = c
    return label_of_distinct[inverse]
