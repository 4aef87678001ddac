"""Parameter-efficient training: autodiff plumbing, AdamW, ablations.

Only the tokenizer, adapters, classification head, and (in one ablation
mode) a small 3D positional MLP are trainable; the backbone is hashed
before and after every run to prove it never moved. The optimizer and
scheduler are written out explicitly so each update is testable against
hand-evaluated formulas, and every run is bit-reproducible from its
seed in single-threaded mode.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .adapter import AdapterConfig, AdapterState
from .backbone import BackboneBundle, BackboneConfig, forward, init_random_backbone
from .errors import ConfigMismatch, NonScalarLoss, PointBridgeError
from .pointcloud import AugmentConfig, PointCloud, augment
from .projection import (
    LINE1D,
    PLANE2D,
    ProjectionConfig,
    assign_positional_encoding,
    make_view_basis,
    project_positions,
)
from .encodings import sinusoid_3d
from .tokenizer import (
    TokenSet,
    TokenizerConfig,
    _fps_batch,
    _gather_rows,
    init_tokenizer_params,
    tokenize_batch,
)

PE_MODES = ("virtual_projection", "sinusoidal_3d", "learnable_3d", "none")
PE3D_HIDDEN = 32


@dataclass
class TrainConfig:
    """Optimization settings and harness-level toggles.

    Attributes:
        lr: initial learning rate, > 0.
        weight_decay: decoupled AdamW decay factor.
        epochs: training epochs, >= 1.
        batch_size: shuffled mini-batch size.
        seed: master seed for shuffling, augmentation, and inits.
        scheduler: "cosine" annealing or "constant".
        insertion_depth: adapter depth; None means every block.
        adapter_position: "after", "before", or "parallel".
        pe_mode: positional-information source for the tokens.
        m_views: number of virtual projection views.
    """

    lr: float = 5e-4
    weight_decay: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    scheduler: str = "cosine"
    insertion_depth: int | None = None
    adapter_position: str = "after"
    pe_mode: str = "virtual_projection"
    m_views: int = 6

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigMismatch(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigMismatch(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigMismatch(f"batch_size must be >= 1, got {self.batch_size}")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigMismatch(f"unknown scheduler {self.scheduler!r}")
        if self.pe_mode not in PE_MODES:
            raise ConfigMismatch(f"unknown pe_mode {self.pe_mode!r}")
        if self.adapter_position not in ("after", "before", "parallel"):
            raise ConfigMismatch(f"unknown adapter_position {self.adapter_position!r}")
        if self.m_views < 1:
            raise ConfigMismatch(f"m_views must be >= 1, got {self.m_views}")


@dataclass
class ExperimentConfig:
    """Everything one run needs besides the dataset.

    Attributes:
        backbone: frozen transformer architecture.
        tokenizer: point tokenizer architecture.
        adapter: adapter internals; None disables adapters entirely.
        train: optimization settings.
        n_classes: classification head width.
        augment: train-time cloud augmentation; None disables it.
        fps_to: optional pre-tokenizer FPS downsample (probe pipelines).
    """

    backbone: BackboneConfig
    tokenizer: TokenizerConfig
    adapter: AdapterConfig | None
    train: TrainConfig
    n_classes: int = 5
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    fps_to: int | None = None

    def projection_config(self) -> ProjectionConfig:
        seg = self.adapter.segment_size if self.adapter else 2
        return ProjectionConfig(
            mode=self.backbone.pe_mode,
            m_views=self.train.m_views,
            line_length=self.backbone.line_length,
            segment_size=seg,
            plane_extent=self.backbone.plane_extent,
            patch_size=self.backbone.patch_size,
        )

    def insertion_depth(self) -> int:
        if self.adapter is None:
            return 0
        depth = self.train.insertion_depth
        return self.backbone.n_blocks if depth is None else depth


class TrainableSet:
    """Named registry of trainable tensors, disjoint from the backbone."""

    def __init__(self, params: dict[str, torch.Tensor]):
        self.params = params
        for p in params.values():
            p.requires_grad_(True)

    def count(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Sub-registry with the prefix stripped, e.g. 'tokenizer.'."""
        return {
            name[len(prefix):]: p
            for name, p in self.params.items()
            if name.startswith(prefix)
        }

    def save(self, path: str, meta: dict | None = None) -> None:
        arrays = {
            name: p.detach().cpu().numpy().astype(np.float32)
            for name, p in self.params.items()
        }
        ckpt.write_archive(path, {"kind": "trainables", **(meta or {})}, arrays)


@dataclass
class Metrics:
    """Per-epoch records plus run-level accounting.

    Attributes:
        rows: (epoch, train loss, test accuracy, lr) per epoch.
        ratio: trainable / (trainable + frozen) parameter ratio.
        wall_clock: run duration in seconds.
    """

    rows: list[tuple[int, float, float, float]]
    ratio: float
    wall_clock: float

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1][2] if self.rows else 0.0


def write_metrics_csv(path: str, metrics: Metrics) -> None:
    """CSV with columns epoch,loss,acc,lr; floats via repr for fidelity."""
    with open(path, "w") as fh:
        fh.write("epoch,loss,acc,lr\n")
        for epoch, loss, acc, lr in metrics.rows:
            fh.write(f"{epoch},{loss!r},{acc!r},{lr!r}\n")


def init_trainables(
    exp: ExperimentConfig, dtype: torch.dtype = torch.float32
) -> TrainableSet:
    """Build the full trainable registry for an experiment.

    Child seeds derive from train.seed by fixed offsets so each
    component's init is independent of the others' sizes.
    """
    seed = exp.train.seed
    dim = exp.backbone.dim
    params: dict[str, torch.Tensor] = {}
    for name, p in init_tokenizer_params(exp.tokenizer, seed, dtype).items():
        params[f"tokenizer.{name}"] = p
    if exp.adapter is not None:
        state = init_adapter_state_for(exp, dtype)
        for i, blk in enumerate(state.blocks):
            for key, p in blk.items():
                params[f"adapters.{i}.{key}"] = p
    gen = torch.Generator().manual_seed(seed + 2)
    bound = 1.0 / math.sqrt(dim)
    head_w = torch.zeros(dim, exp.n_classes, dtype=dtype)
    head_w.uniform_(-bound, bound, generator=gen)
    params["head.w"] = head_w
    params["head.b"] = torch.zeros(exp.n_classes, dtype=dtype)
    if exp.train.pe_mode == "learnable_3d":
        gen3 = torch.Generator().manual_seed(seed + 3)
        fc1 = torch.zeros(3, PE3D_HIDDEN, dtype=dtype)
        fc1.uniform_(-1.0 / math.sqrt(3), 1.0 / math.sqrt(3), generator=gen3)
        fc2 = torch.zeros(PE3D_HIDDEN, dim, dtype=dtype)
        fc2.uniform_(
            -1.0 / math.sqrt(PE3D_HIDDEN), 1.0 / math.sqrt(PE3D_HIDDEN), generator=gen3
        )
        params["pe3d.fc1.w"] = fc1
        params["pe3d.fc1.b"] = torch.zeros(PE3D_HIDDEN, dtype=dtype)
        params["pe3d.fc2.w"] = fc2
        params["pe3d.fc2.b"] = torch.zeros(dim, dtype=dtype)
    return TrainableSet(params)


def init_adapter_state_for(
    exp: ExperimentConfig, dtype: torch.dtype = torch.float32
) -> AdapterState:
    from .adapter import init_adapter_state

    return init_adapter_state(
        exp.adapter,
        exp.backbone.dim,
        exp.insertion_depth(),
        exp.train.adapter_position,
        seed=exp.train.seed + 1,
        dtype=dtype,
    )


def adapter_state_view(exp: ExperimentConfig, tset: TrainableSet) -> AdapterState | None:
    """AdapterState whose blocks alias the registry tensors (grads flow)."""
    if exp.adapter is None:
        return None
    depth = exp.insertion_depth()
    blocks = [tset.subset(f"adapters.{i}.") for i in range(depth)]
    return AdapterState(exp.adapter, depth, exp.train.adapter_position, blocks)


def _prepare_points(points: torch.Tensor, exp: ExperimentConfig) -> torch.Tensor:
    if exp.fps_to is None:
        return points
    idx = _fps_batch(points, exp.fps_to)
    return _gather_rows(points, idx)


def pipeline_logits(
    points: torch.Tensor,
    exp: ExperimentConfig,
    bundle: BackboneBundle,
    tset: TrainableSet,
) -> torch.Tensor:
    """Full pipeline: tokenize, encode positions, frozen forward, head.

    Args:
        points: (B, P, 3) clouds in backbone dtype.
        exp: experiment configuration.
        bundle: frozen backbone.
        tset: trainable registry.

    Returns:
        (B, n_classes) logits.
    """
    points = _prepare_points(points, exp)
    tokens = tokenize_batch(points, exp.tokenizer, tset.subset("tokenizer."))
    proj_cfg = exp.projection_config()
    pe_mode = exp.train.pe_mode
    positions = None
    if pe_mode == "virtual_projection":
        basis = make_view_basis(proj_cfg)
        tokens, positions = assign_positional_encoding(
            tokens, basis, proj_cfg, bundle.pe
        )
    else:
        if pe_mode == "sinusoidal_3d":
            pe = sinusoid_3d(tokens.coords, exp.backbone.dim)
            tokens = TokenSet(tokens.features + pe, tokens.coords)
        elif pe_mode == "learnable_3d":
            h = torch.tanh(
                tokens.coords.to(tset.params["pe3d.fc1.w"].dtype)
                @ tset.params["pe3d.fc1.w"]
                + tset.params["pe3d.fc1.b"]
            )
            pe = h @ tset.params["pe3d.fc2.w"] + tset.params["pe3d.fc2.b"]
            tokens = TokenSet(tokens.features + pe, tokens.coords)
        if exp.adapter is not None and exp.adapter.grouping == "projected":
            basis = make_view_basis(proj_cfg)
            positions = project_positions(
                tokens.coords.detach().cpu().numpy(), basis, proj_cfg
            )
    adapters = adapter_state_view(exp, tset)
    _, summary = forward(bundle, tokens, adapters=adapters, positions=positions)
    return summary @ tset.params["head.w"] + tset.params["head.b"]


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean-reduced cross entropy; no label smoothing."""
    return F.cross_entropy(logits, labels)


def grad(loss_fn, trainables: TrainableSet) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every registry entry.

    Args:
        loss_fn: nullary callable evaluating the loss from the current
            parameter values.
        trainables: registry; only its tensors receive gradients.

    Returns:
        name -> gradient tensor; parameters the loss never touched get
        zeros. Backbone tensors are absent by construction.

    Raises:
        NonScalarLoss: if loss_fn() is not a 0-d tensor.
    """
    loss = loss_fn()
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise NonScalarLoss(f"loss must be a scalar tensor, got {loss!r}")
    names = list(trainables.params)
    tensors = [trainables.params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(t))
        for n, t, g in zip(names, tensors, grads)
    }


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def step_adamw(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam step, in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    with bias-corrected moments m_hat, v_hat.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.add_(m_hat / (v_hat.sqrt() + eps) + weight_decay * p, alpha=-lr)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs))."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _augment_batch(
    points: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    out = np.empty_like(points)
    for i in range(points.shape[0]):
        out[i] = augment(PointCloud(points[i]), cfg, rng).points
    return out


def evaluate(
    dataset,
    bundle: BackboneBundle,
    tset: TrainableSet,
    exp: ExperimentConfig,
    batch_size: int = 64,
) -> float:
    """Mean test accuracy: one unaugmented forward per sample, argmax."""
    points, labels = dataset.test_points, dataset.test_labels
    if len(labels) == 0:
        return 0.0
    dtype = bundle.tensors["cls.token"].dtype
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            chunk = points[start : start + batch_size]
            logits = pipeline_logits(
                torch.tensor(chunk, dtype=dtype), exp, bundle, tset
            )
            pred = logits.argmax(dim=-1).numpy()
            correct += int((pred == labels[start : start + batch_size]).sum())
    return correct / len(labels)


def param_report(
    tset: TrainableSet, bundle: BackboneBundle
) -> tuple[int, int, float]:
    """(trainable count, total count, trainable/total ratio)."""
    trainable = tset.count()
    frozen = sum(t.numel() for t in bundle.tensors.values())
    total = trainable + frozen
    return trainable, total, trainable / total


def train(
    dataset,
    bundle: BackboneBundle,
    exp: ExperimentConfig,
    metrics_path: str | None = None,
) -> tuple[TrainableSet, Metrics]:
    """Run the full PEFT loop; the backbone is checked bit-frozen.

    Per epoch: seeded shuffle, per-sample augmentation (train only),
    tokenize, positional encoding per pe_mode, frozen forward with
    adapters, linear head, cross entropy, explicit AdamW step at the
    cosine-annealed rate; then a full test evaluation.

    Returns:
        (final trainables, Metrics with one row per epoch).

    Raises:
        PointBridgeError: if the backbone hash changed (never expected).
    """
    t0 = time.perf_counter()
    cfg = exp.train
    hash_before = bundle.weights_sha256()
    dtype = bundle.tensors["cls.token"].dtype
    tset = init_trainables(exp, dtype)
    adam = AdamState()
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset.train_labels)
    labels_all = torch.from_numpy(dataset.train_labels)
    rows: list[tuple[int, float, float, float]] = []
    for epoch in range(cfg.epochs):
        lr_t = (
            cosine_lr(epoch, cfg.epochs, cfg.lr)
            if cfg.scheduler == "cosine"
            else cfg.lr
        )
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = dataset.train_points[idx]
            if exp.augment is not None:
                batch = _augment_batch(batch, exp.augment, rng)
            pts = torch.tensor(batch, dtype=dtype)
            labels = labels_all[idx]
            batch_loss = []

            def loss_fn():
                loss = classification_loss(
                    pipeline_logits(pts, exp, bundle, tset), labels
                )
                batch_loss.append(loss.item())
                return loss

            grad_map = grad(loss_fn, tset)
            step_adamw(tset.params, grad_map, adam, lr_t, cfg.weight_decay)
            epoch_loss += batch_loss[-1] * len(idx)
        acc = evaluate(dataset, bundle, tset, exp)
        rows.append((epoch, epoch_loss / n, acc, lr_t))
    if bundle.weights_sha256() != hash_before:
        raise PointBridgeError("backbone tensors changed during training")
    _, _, ratio = param_report(tset, bundle)
    metrics = Metrics(rows, ratio, time.perf_counter() - t0)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    return tset, metrics


# ---------------------------------------------------------------------------
# Presets


def desk_backbone(mode: str = LINE1D) -> BackboneConfig:
    """4-block, D=64 stand-in scaled from the reference architecture."""
    return BackboneConfig(
        n_blocks=4,
        dim=64,
        n_heads=4,
        pe_mode=mode,
        line_length=77,
        plane_extent=(512, 512),
        patch_size=26,
        modality_tag="synthetic",
    )


def desk_adapter(mode: str = LINE1D) -> AdapterConfig:
    grid = 0.08 if mode == LINE1D else 0.16
    return AdapterConfig(
        mode=mode,
        segment_size=2,
        patch_size=26,
        grid_size_3d=grid,
        bottleneck_dim=16,
    )


def desk_experiment(mode: str = LINE1D, seed: int = 0, epochs: int = 50) -> ExperimentConfig:
    """Desk-scale full configuration: trainable in minutes on a CPU."""
    return ExperimentConfig(
        backbone=desk_backbone(mode),
        tokenizer=TokenizerConfig(),
        adapter=desk_adapter(mode),
        train=TrainConfig(lr=1e-3, epochs=epochs, seed=seed),
        n_classes=5,
    )


def probe_experiment(mode: str = LINE1D, seed: int = 0, epochs: int = 50) -> ExperimentConfig:
    """Head-only linear probe: frozen sinusoid features, no adapters."""
    return ExperimentConfig(
        backbone=desk_backbone(mode),
        tokenizer=TokenizerConfig(stages=0, points_in=64, tokens_out=64, dims=(64,)),
        adapter=None,
        train=TrainConfig(lr=1e-3, epochs=epochs, seed=seed),
        n_classes=5,
        fps_to=64,
    )


def toy_experiment(seed: int = 0) -> ExperimentConfig:
    """Gradient-check scale: 2 blocks, D=16, 12 tokens, 2 views, 2D."""
    return ExperimentConfig(
        backbone=BackboneConfig(
            n_blocks=2,
            dim=16,
            n_heads=2,
            pe_mode=PLANE2D,
            plane_extent=(52, 52),
            patch_size=26,
            modality_tag="synthetic",
        ),
        tokenizer=TokenizerConfig(
            stages=2, points_in=48, tokens_out=12, k_neighbors=4, dims=(6, 8, 12, 16)
        ),
        adapter=AdapterConfig(
            mode=PLANE2D,
            patch_size=26,
            grid_size_3d=0.4,
            bottleneck_dim=8,
        ),
        train=TrainConfig(lr=1e-3, epochs=1, batch_size=2, seed=seed, m_views=2),
        n_classes=5,
        augment=None,
    )


def reference_experiment(mode: str = LINE1D) -> ExperimentConfig:
    """Full-scale architecture for parameter accounting (not training)."""
    return ExperimentConfig(
        backbone=BackboneConfig(
            n_blocks=12,
            dim=768,
            n_heads=12,
            pe_mode=mode,
            line_length=77,
            plane_extent=(512, 512),
            patch_size=26,
            modality_tag="language" if mode == LINE1D else "vision",
        ),
        tokenizer=TokenizerConfig(
            stages=3,
            points_in=1024,
            tokens_out=128,
            k_neighbors=8,
            dims=(24, 48, 96, 192, 768),
        ),
        adapter=AdapterConfig(
            mode=mode,
            segment_size=2,
            patch_size=26,
            grid_size_3d=0.08 if mode == LINE1D else 0.16,
            bottleneck_dim=32,
        ),
        train=TrainConfig(),
        n_classes=15,
    )


# ---------------------------------------------------------------------------
# Ablation harness

ABLATION_TABLES = ("main", "vp", "adapter", "view", "size", "depth", "agg")


def _row(cells: dict, modes: tuple[str, ...], transform) -> dict:
    return {"cells": cells, "modes": modes, "transform": transform}


def _no_adapter(exp: ExperimentConfig) -> ExperimentConfig:
    return replace(exp, adapter=None)


def _set_pe(exp: ExperimentConfig, pe_mode: str) -> ExperimentConfig:
    return replace(exp, train=replace(exp.train, pe_mode=pe_mode))


def _set_adapter(exp: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(exp, adapter=replace(exp.adapter, **kw))


def _ablation_rows(table: str) -> tuple[list[str], list[dict]]:
    """(CSV header, row descriptors) mirroring the reported table layouts."""
    both = (LINE1D, PLANE2D)
    if table == "main":
        header = ["vp", "ga", "params_m", "acc_1d", "acc_2d"]
        rows = [
            _row({"vp": 0, "ga": 0}, both, lambda e: _set_pe(_no_adapter(e), "none")),
            _row({"vp": 1, "ga": 0}, both, _no_adapter),
            _row({"vp": 0, "ga": 1}, both, lambda e: _set_pe(e, "none")),
            _row({"vp": 1, "ga": 1}, both, lambda e: e),
        ]
    elif table == "vp":
        header = ["sinusoidal", "learnable", "virtual_projection", "acc_1d", "acc_2d"]
        rows = [
            _row(
                {"sinusoidal": 0, "learnable": 0, "virtual_projection": 0},
                both,
                lambda e: _set_pe(e, "none"),
            ),
            _row(
                {"sinusoidal": 1, "learnable": 0, "virtual_projection": 0},
                both,
                lambda e: _set_pe(e, "sinusoidal_3d"),
            ),
            _row(
                {"sinusoidal": 0, "learnable": 1, "virtual_projection": 0},
                both,
                lambda e: _set_pe(e, "learnable_3d"),
            ),
            _row(
                {"sinusoidal": 0, "learnable": 0, "virtual_projection": 1},
                both,
                lambda e: e,
            ),
        ]
    elif table == "adapter":
        header = ["local_aggregation", "adaptive_ensemble", "params_m", "acc_1d", "acc_2d"]
        rows = [
            _row(
                {"local_aggregation": 0, "adaptive_ensemble": 0},
                both,
                lambda e: _set_adapter(e, variant="mlp_baseline"),
            ),
            _row(
                {"local_aggregation": 1, "adaptive_ensemble": 0},
                both,
                lambda e: _set_adapter(e, ensemble="mean"),
            ),
            _row(
                {"local_aggregation": 1, "adaptive_ensemble": 1},
                both,
                lambda e: e,
            ),
        ]
    elif table == "view":
        header = ["proj_2d", "proj_1d", "view_num", "acc_1d", "acc_2d"]
        rows = []
        for m in (4, 6, 8):
            rows.append(
                _row(
                    {"proj_2d": 1, "proj_1d": 0, "view_num": m},
                    (PLANE2D,),
                    lambda e, m=m: replace(e, train=replace(e.train, m_views=m)),
                )
            )
        for m in (4, 6, 8):
            rows.append(
                _row(
                    {"proj_2d": 0, "proj_1d": 1, "view_num": m},
                    (LINE1D,),
                    lambda e, m=m: replace(e, train=replace(e.train, m_views=m)),
                )
            )
    elif table == "size":
        header = ["patch_size", "line_size", "grid_size", "acc_1d", "acc_2d"]
        rows = []
        for grid in (0.08, 0.16):
            for patch in (16, 26, 34):
                rows.append(
                    _row(
                        {"patch_size": patch, "line_size": "", "grid_size": grid},
                        (PLANE2D,),
                        lambda e, p=patch, g=grid: _set_adapter(
                            e, patch_size=p, grid_size_3d=g
                        ),
                    )
                )
        for grid in (0.08, 0.16):
            for seg in (1, 2, 3):
                rows.append(
                    _row(
                        {"patch_size": "", "line_size": seg, "grid_size": grid},
                        (LINE1D,),
                        lambda e, s=seg, g=grid: _set_adapter(
                            e, segment_size=s, grid_size_3d=g
                        ),
                    )
                )
    elif table == "depth":
        header = ["position", "insertion_depth", "acc_1d", "acc_2d"]
        rows = []
        for position in ("after", "before", "parallel"):
            for depth in (1, 2, 3, 4):
                rows.append(
                    _row(
                        {"position": position, "insertion_depth": depth},
                        both,
                        lambda e, p=position, d=depth: replace(
                            e,
                            train=replace(
                                e.train, adapter_position=p, insertion_depth=d
                            ),
                        ),
                    )
                )
    elif table == "agg":
        header = ["guided_3d", "guided_2d", "guided_1d", "acc_1d", "acc_2d"]
        rows = [
            _row(
                {"guided_3d": 1, "guided_2d": 0, "guided_1d": 0},
                (PLANE2D,),
                lambda e: _set_adapter(e, grouping="voxel3d"),
            ),
            _row(
                {"guided_3d": 0, "guided_2d": 1, "guided_1d": 0},
                (PLANE2D,),
                lambda e: e,
            ),
            _row(
                {"guided_3d": 1, "guided_2d": 0, "guided_1d": 0},
                (LINE1D,),
                lambda e: _set_adapter(e, grouping="voxel3d"),
            ),
            _row(
                {"guided_3d": 0, "guided_2d": 0, "guided_1d": 1},
                (LINE1D,),
                lambda e: e,
            ),
        ]
    else:
        raise ConfigMismatch(
            f"unknown ablation table {table!r}; choices: {', '.join(ABLATION_TABLES)}"
        )
    return header, rows


def run_ablation(
    table: str,
    dataset,
    out_path: str,
    seeds: tuple[int, ...] = (0,),
    make_experiment=desk_experiment,
    epochs: int | None = None,
) -> list[dict]:
    """Train every cell of one ablation table and write its CSV.

    Args:
        table: one of ABLATION_TABLES.
        dataset: benchmark to train on.
        out_path: CSV destination.
        seeds: shared seeds; cell accuracy is the mean over them.
        make_experiment: factory (mode, seed, epochs) -> ExperimentConfig,
            defaulting to the desk preset; tests pass smaller ones.
        epochs: optional override forwarded to the factory.

    Returns:
        The row dicts written (header order), "error" for failed cells.
    """
    header, rows = _ablation_rows(table)
    acc_col = {LINE1D: "acc_1d", PLANE2D: "acc_2d"}
    results = []
    for row in rows:
        record = {key: "" for key in header}
        record.update({k: str(v) for k, v in row["cells"].items()})
        for mode in row["modes"]:
            try:
                accs = []
                count = None
                for seed in seeds:
                    kwargs = {"seed": seed}
                    if epochs is not None:
                        kwargs["epochs"] = epochs
                    exp = row["transform"](make_experiment(mode, **kwargs))
                    bundle = init_random_backbone(exp.backbone, seed=seed)
                    tset, metrics = train(dataset, bundle, exp)
                    accs.append(metrics.final_accuracy)
                    count = tset.count()
                record[acc_col[mode]] = f"{np.mean(accs):.4f}"
                if "params_m" in header and count is not None:
                    record["params_m"] = f"{count / 1e6:.3f}"
            except Exception as exc:  # noqa: BLE001 - a cell failure must not kill the sweep
                record[acc_col[mode]] = "error"
                record.setdefault("_errors", []).append(f"{mode}: {exc}")
        results.append(record)
    with open(out_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for record in results:
            fh.write(",".join(str(record[key]) for key in header) + "\n")
    return results
