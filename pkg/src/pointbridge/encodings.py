"""Sinusoidal positional encoding builders shared by several modules.

Tables built here are deterministic pure functions of their shape
arguments. Rows of the 1D and 2D tables have norm sqrt(D/2): every
dimension pair contributes sin^2 + cos^2 = 1.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DimMismatch


def _sinusoid_rows(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard transformer sinusoid: (len(positions), dim), dim even."""
    if dim % 2 != 0:
        raise DimMismatch(f"sinusoid dim must be even, got {dim}")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((positions.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sinusoid_table_1d(length: int, dim: int) -> torch.Tensor:
    """Sequence-position sinusoid table, shape (length, dim)."""
    rows = _sinusoid_rows(np.arange(length, dtype=np.float64), dim)
    return torch.from_numpy(rows.astype(np.float32))


def sinusoid_table_2d(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Factorized 2D sinusoid grid, shape (grid_h, grid_w, dim).

    The first dim/2 channels encode the row index, the rest the column
    index, each with a standard sinusoid at dim/2.
    """
    if dim % 4 != 0:
        raise DimMismatch(f"2D sinusoid dim must be divisible by 4, got {dim}")
    half = dim // 2
    rows = _sinusoid_rows(np.arange(grid_h, dtype=np.float64), half)
    cols = _sinusoid_rows(np.arange(grid_w, dtype=np.float64), half)
    table = np.empty((grid_h, grid_w, dim), dtype=np.float64)
    table[:, :, :half] = rows[:, None, :]
    table[:, :, half:] = cols[None, :, :]
    return torch.from_numpy(table.astype(np.float32))


def sinusoid_3d(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Parameter-free embedding of 3D coordinates in [-1, 1].

    Each axis gets floor(dim/6) octave frequencies (sin and cos of
    pi * 2^i * coord); leftover channels beyond 6 * floor(dim/6) are zero.

    Args:
        coords: (..., 3) tensor.
        dim: output channel count, at least 6.

    Returns:
        (..., dim) tensor in the dtype of coords.
    """
    if dim < 6:
        raise DimMismatch(f"3D sinusoid dim must be >= 6, got {dim}")
    n_freq = dim // 6
    octaves = torch.pow(
        2.0, torch.arange(n_freq, dtype=coords.dtype, device=coords.device)
    )
    angles = torch.pi * coords[..., None] * octaves  # (..., 3, F)
    parts = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., 3, 2F)
    flat = parts.reshape(*coords.shape[:-1], 6 * n_freq)
    if 6 * n_freq == dim:
        return flat
    pad = torch.zeros(*coords.shape[:-1], dim - 6 * n_freq, dtype=coords.dtype)
    return torch.cat([flat, pad], dim=-1)
