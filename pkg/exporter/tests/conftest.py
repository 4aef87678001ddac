"""Synthetic source checkpoints shaped like the supported model families."""

import numpy as np
import pytest
import torch

DIM = 16
HEADS = 4
FFN = 32
CLIP_BLOCKS = 3
DINO_BLOCKS = 2
DINO_GRID = 7


def _randn(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.standard_normal(shape).astype(np.float32)


def clip_text_state(rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """A miniature text-tower state dict in torch (out, in) layout."""
    state: dict[str, torch.Tensor] = {
        "positional_embedding": torch.from_numpy(_randn(rng, 77, DIM)),
        "ln_final.weight": torch.from_numpy(_randn(rng, DIM)),
        "ln_final.bias": torch.from_numpy(_randn(rng, DIM)),
        "text_projection": torch.from_numpy(_randn(rng, DIM, DIM)),
        "attn_mask": torch.zeros(77, 77, dtype=torch.bool),
    }
    for i in range(CLIP_BLOCKS):
        p = f"transformer.resblocks.{i}."
        state[p + "ln_1.weight"] = torch.from_numpy(_randn(rng, DIM))
        state[p + "ln_1.bias"] = torch.from_numpy(_randn(rng, DIM))
        state[p + "attn.in_proj_weight"] = torch.from_numpy(_randn(rng, 3 * DIM, DIM))
        state[p + "attn.in_proj_bias"] = torch.from_numpy(_randn(rng, 3 * DIM))
        state[p + "attn.out_proj.weight"] = torch.from_numpy(_randn(rng, DIM, DIM))
        state[p + "attn.out_proj.bias"] = torch.from_numpy(_randn(rng, DIM))
        state[p + "ln_2.weight"] = torch.from_numpy(_randn(rng, DIM))
        state[p + "ln_2.bias"] = torch.from_numpy(_randn(rng, DIM))
        state[p + "mlp.c_fc.weight"] = torch.from_numpy(_randn(rng, FFN, DIM))
        state[p + "mlp.c_fc.bias"] = torch.from_numpy(_randn(rng, FFN))
        state[p + "mlp.c_proj.weight"] = torch.from_numpy(_randn(rng, DIM, FFN))
        state[p + "mlp.c_proj.bias"] = torch.from_numpy(_randn(rng, DIM))
    return state


def dinov2_state(rng: np.random.Generator, grid: int = DINO_GRID) -> dict[str, np.ndarray]:
    """A miniature vision-tower state dict with a (1, 1 + G*G, D) table."""
    state: dict[str, np.ndarray] = {
        "pos_embed": _randn(rng, 1, 1 + grid * grid, DIM),
        "cls_token": _randn(rng, 1, 1, DIM),
        "norm.weight": _randn(rng, DIM),
        "norm.bias": _randn(rng, DIM),
    }
    for i in range(DINO_BLOCKS):
        p = f"blocks.{i}."
        state[p + "norm1.weight"] = _randn(rng, DIM)
        state[p + "norm1.bias"] = _randn(rng, DIM)
        state[p + "attn.qkv.weight"] = _randn(rng, 3 * DIM, DIM)
        state[p + "attn.qkv.bias"] = _randn(rng, 3 * DIM)
        state[p + "attn.proj.weight"] = _randn(rng, DIM, DIM)
        state[p + "attn.proj.bias"] = _randn(rng, DIM)
        state[p + "norm2.weight"] = _randn(rng, DIM)
        state[p + "norm2.bias"] = _randn(rng, DIM)
        state[p + "mlp.fc1.weight"] = _randn(rng, FFN, DIM)
        state[p + "mlp.fc1.bias"] = _randn(rng, FFN)
        state[p + "mlp.fc2.weight"] = _randn(rng, DIM, FFN)
        state[p + "mlp.fc2.bias"] = _randn(rng, DIM)
    return state


@pytest.fixture(scope="session")
def clip_source(tmp_path_factory) -> str:
    rng = np.random.default_rng(42)
    path = tmp_path_factory.mktemp("sources") / "clip_text.pt"
    torch.save(clip_text_state(rng), path)
    return str(path)


@pytest.fixture(scope="session")
def dino_source(tmp_path_factory) -> str:
    rng = np.random.default_rng(43)
    path = tmp_path_factory.mktemp("sources") / "dinov2.npz"
    np.savez(path, **dinov2_state(rng))
    return str(path)
