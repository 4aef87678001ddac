"""Virtual 3D-to-1D/2D projection and positional-encoding transfer.

M views are generated at uniform azimuth angles 2*pi*j/M. In 1D mode a
view is a unit direction in the horizontal (x-z) plane and a token's
position is the raw dot product, affinely mapped from [-1, 1] onto
[0, line_length). In 2D mode a view is an orthographic rotation at the
configured elevation; after rotating, the depth axis drops and the
remaining two coordinates map onto [0, width) x [0, height). Positions
clamp at the table edges, and PE lookup is pure floor indexing with no
interpolation. The assigned encoding per token is the average of its M
per-view table entries added onto the token feature.

Geometry runs in float64 numpy; tables are torch tensors so the
training pipeline can gather from them directly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .encodings import sinusoid_table_1d, sinusoid_table_2d
from .errors import (
    ConfigMismatch,
    GeometryMismatch,
    IOFormatError,
    ModeMismatch,
)
from .tokenizer import TokenSet

LINE1D = "line1d"
PLANE2D = "plane2d"

_PE_MAGIC = b"A2PE"


@dataclass
class ProjectionConfig:
    """Virtual projection geometry.

    Attributes:
        mode: LINE1D or PLANE2D.
        m_views: number of views M, >= 1.
        line_length: 1D table length (positions).
        segment_size: 1D grouping segment width (positions), >= 1.
        plane_extent: (width, height) of the 2D plane in pixels.
        patch_size: 2D patch edge in pixels.
        elevation_deg: camera elevation for 2D views.
    """

    mode: str = LINE1D
    m_views: int = 6
    line_length: int = 77
    segment_size: int = 2
    plane_extent: tuple[int, int] = (512, 512)
    patch_size: int = 26
    elevation_deg: float = 30.0

    def __post_init__(self) -> None:
        if self.mode not in (LINE1D, PLANE2D):
            raise ConfigMismatch(f"unknown projection mode {self.mode!r}")
        if self.m_views < 1:
            raise ConfigMismatch(f"m_views must be >= 1, got {self.m_views}")
        if self.segment_size < 1:
            raise ConfigMismatch(f"segment_size must be >= 1, got {self.segment_size}")
        if self.line_length < 1:
            raise ConfigMismatch(f"line_length must be >= 1, got {self.line_length}")
        w, h = self.plane_extent
        if self.patch_size < 1 or self.patch_size > min(w, h):
            raise ConfigMismatch(
                f"patch_size {self.patch_size} out of range for plane {w}x{h}"
            )

    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) of the 2D PE grid; ceil keeps in-range pixels valid."""
        w, h = self.plane_extent
        return (
            int(math.ceil(h / self.patch_size)),
            int(math.ceil(w / self.patch_size)),
        )


@dataclass
class ViewBasis:
    """Per-view geometry: unit directions (1D) or rotations (2D).

    Attributes:
        mode: LINE1D or PLANE2D.
        directions: (M, 3) unit vectors; None in 2D mode.
        rotations: (M, 3, 3) orthonormal matrices; None in 1D mode.
    """

    mode: str
    directions: np.ndarray | None = None
    rotations: np.ndarray | None = None

    @property
    def m_views(self) -> int:
        arr = self.directions if self.mode == LINE1D else self.rotations
        return arr.shape[0]


@dataclass
class ProjectedPositions:
    """Clamped per-view token positions in table units.

    Attributes:
        mode: LINE1D or PLANE2D.
        values: (..., M, N) line positions, or (..., M, N, 2) as (u, v).
        pe_index: (..., M, N) row indices, or (..., M, N, 2) as (row, col).
    """

    mode: str
    values: np.ndarray
    pe_index: np.ndarray


@dataclass
class PETable:
    """Frozen positional-encoding table of the source modality.

    Attributes:
        mode: LINE1D (data (L, D)) or PLANE2D (data (Gh, Gw, D)).
        data: torch tensor, never mutated during training.
        patch_size: pixel size bound from the projection config (2D only).
    """

    mode: str
    data: torch.Tensor
    patch_size: int | None = None
    frozen: bool = True

    @property
    def dim(self) -> int:
        return int(self.data.shape[-1])

    def validate_against(self, cfg: ProjectionConfig) -> None:
        """Check mode and geometry against a projection config."""
        if self.mode != cfg.mode:
            raise ModeMismatch(f"table mode {self.mode} vs config mode {cfg.mode}")
        if self.mode == LINE1D:
            if self.data.shape[0] != cfg.line_length:
                raise GeometryMismatch(
                    f"1D table length {self.data.shape[0]} != {cfg.line_length}"
                )
        else:
            if tuple(self.data.shape[:2]) != cfg.grid_shape():
                raise GeometryMismatch(
                    f"2D table grid {tuple(self.data.shape[:2])}"
                    f" != {cfg.grid_shape()}"
                )
            if self.patch_size is not None and self.patch_size != cfg.patch_size:
                raise GeometryMismatch(
                    f"table patch {self.patch_size} != config {cfg.patch_size}"
                )


def _rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def make_view_basis(cfg: ProjectionConfig) -> ViewBasis:
    """Build the M-view basis at uniform azimuths 2*pi*j/M.

    1D directions lie in the horizontal plane: (cos a, 0, sin a). 2D
    rotations tilt by the configured elevation after the azimuth turn.
    """
    azimuths = 2.0 * np.pi * np.arange(cfg.m_views) / cfg.m_views
    if cfg.mode == LINE1D:
        dirs = np.stack(
            [np.cos(azimuths), np.zeros_like(azimuths), np.sin(azimuths)], axis=1
        )
        return ViewBasis(LINE1D, directions=dirs)
    tilt = _rot_x(np.deg2rad(cfg.elevation_deg))
    rots = np.stack([tilt @ _rot_y(a) for a in azimuths])
    return ViewBasis(PLANE2D, rotations=rots)


def project_1d(p: np.ndarray, basis: ViewBasis, j: int) -> np.ndarray:
    """Dot product of points with view direction j; exactly linear in p.

    Args:
        p: (..., 3) coordinates.
        basis: 1D-mode basis.
        j: view index.

    Returns:
        (...) scalar projections (unbounded, not yet table coordinates).
    """
    if basis.mode != LINE1D:
        raise ModeMismatch("project_1d needs a 1D basis")
    return np.asarray(p, dtype=np.float64) @ basis.directions[j]


def project_2d(
    p: np.ndarray, basis: ViewBasis, j: int, cfg: ProjectionConfig
) -> np.ndarray:
    """Orthographic projection of points onto view j's plane.

    Rotates by the view matrix, drops the depth (z) axis, and maps the
    remaining (x, y) from [-1, 1]^2 onto [0, width) x [0, height),
    clamping at the edges.

    Args:
        p: (..., 3) coordinates, nominally within the unit sphere.
        basis: 2D-mode basis.
        j: view index.
        cfg: projection geometry.

    Returns:
        (..., 2) positions as (u, v) in pixel units.
    """
    if basis.mode != PLANE2D:
        raise ModeMismatch("project_2d needs a 2D basis")
    q = np.asarray(p, dtype=np.float64) @ basis.rotations[j].T
    w, h = cfg.plane_extent
    u = np.clip((q[..., 0] + 1.0) * 0.5 * w, 0.0, np.nextafter(float(w), 0.0))
    v = np.clip((q[..., 1] + 1.0) * 0.5 * h, 0.0, np.nextafter(float(h), 0.0))
    return np.stack([u, v], axis=-1)


def line_position(t: np.ndarray, cfg: ProjectionConfig) -> np.ndarray:
    """Affine map of raw 1D projections from [-1, 1] to [0, line_length)."""
    scaled = (np.asarray(t, dtype=np.float64) + 1.0) * 0.5 * cfg.line_length
    return np.clip(scaled, 0.0, np.nextafter(float(cfg.line_length), 0.0))


def project_positions(
    coords: np.ndarray, basis: ViewBasis, cfg: ProjectionConfig
) -> ProjectedPositions:
    """Project token coords into every view and derive PE indices.

    Args:
        coords: (N, 3) or (B, N, 3) token coordinates.
        basis: view basis matching cfg.mode.
        cfg: projection geometry.

    Returns:
        ProjectedPositions with values (..., M, N[, 2]) and int pe_index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if cfg.mode == LINE1D:
        # (..., N, 3) @ (3, M) -> (..., N, M) -> (..., M, N)
        raw = coords @ basis.directions.T
        pos = line_position(np.moveaxis(raw, -1, -2), cfg)
        idx = np.clip(np.floor(pos).astype(np.int64), 0, cfg.line_length - 1)
        return ProjectedPositions(LINE1D, pos, idx)
    w, h = cfg.plane_extent
    gh, gw = cfg.grid_shape()
    # (M, 3, 3) x (..., N, 3) -> (..., M, N, 3)
    q = np.einsum("mrc,...nc->...mnr", basis.rotations, coords)
    u = np.clip((q[..., 0] + 1.0) * 0.5 * w, 0.0, np.nextafter(float(w), 0.0))
    v = np.clip((q[..., 1] + 1.0) * 0.5 * h, 0.0, np.nextafter(float(h), 0.0))
    values = np.stack([u, v], axis=-1)
    row = np.clip((v // cfg.patch_size).astype(np.int64), 0, gh - 1)
    col = np.clip((u // cfg.patch_size).astype(np.int64), 0, gw - 1)
    return ProjectedPositions(PLANE2D, values, np.stack([row, col], axis=-1))


def pe_lookup(table: PETable, position) -> torch.Tensor:
    """Look up table entries for positions by pure floor indexing.

    Args:
        table: source PE table.
        position: 1D mode: scalar or (...) array of line positions;
            2D mode: (..., 2) array of (u, v) pixel positions (the
            table must have patch_size bound).

    Returns:
        (..., D) tensor of table rows in the table dtype.
    """
    if table.mode == LINE1D:
        pos = np.asarray(position, dtype=np.float64)
        idx = np.clip(np.floor(pos).astype(np.int64), 0, table.data.shape[0] - 1)
        return table.data[torch.as_tensor(idx)]
    if table.patch_size is None:
        raise GeometryMismatch("2D pe_lookup needs patch_size bound on the table")
    pos = np.asarray(position, dtype=np.float64)
    gh, gw = table.data.shape[0], table.data.shape[1]
    row = np.clip(
        np.floor(pos[..., 1] / table.patch_size).astype(np.int64), 0, gh - 1
    )
    col = np.clip(
        np.floor(pos[..., 0] / table.patch_size).astype(np.int64), 0, gw - 1
    )
    return table.data[torch.as_tensor(row), torch.as_tensor(col)]


def gather_pe(table: PETable, positions: ProjectedPositions) -> torch.Tensor:
    """Gather table entries for precomputed pe_index, (..., M, N, D)."""
    if table.mode != positions.mode:
        raise ModeMismatch(
            f"table mode {table.mode} vs positions mode {positions.mode}"
        )
    if positions.mode == LINE1D:
        return table.data[torch.from_numpy(positions.pe_index)]
    idx = positions.pe_index
    return table.data[torch.from_numpy(idx[..., 0]), torch.from_numpy(idx[..., 1])]


def assign_positional_encoding(
    tokens: TokenSet, basis: ViewBasis, cfg: ProjectionConfig, table: PETable
) -> tuple[TokenSet, ProjectedPositions]:
    """Add the M-view average of source PEs onto each token feature.

    Args:
        tokens: tokenizer output, features (..., N, D), coords (..., N, 3).
        basis: view basis matching cfg.
        cfg: projection geometry.
        table: frozen source PE table; mode must match cfg.

    Returns:
        (new TokenSet with encoded features and unchanged coords,
         ProjectedPositions for adapter reuse).

    Raises:
        ModeMismatch: if the table mode disagrees with the config.
        GeometryMismatch: if table dimensions disagree with the config.
    """
    table.validate_against(cfg)
    coords = tokens.coords.detach().cpu().numpy()
    positions = project_positions(coords, basis, cfg)
    pe = gather_pe(table, positions)  # (..., M, N, D)
    avg = pe.mean(dim=-3).to(tokens.features.dtype)
    return TokenSet(tokens.features + avg, tokens.coords), positions


def build_sinusoid_pe(cfg: ProjectionConfig, dim: int) -> PETable:
    """Construct a sinusoidal PETable matching the projection geometry."""
    if cfg.mode == LINE1D:
        return PETable(LINE1D, sinusoid_table_1d(cfg.line_length, dim))
    gh, gw = cfg.grid_shape()
    return PETable(PLANE2D, sinusoid_table_2d(gh, gw, dim), patch_size=cfg.patch_size)


def save_pe_table(path: str, table: PETable) -> None:
    """Write a PETable in the raw A2PE format (magic, mode byte, dims, f32)."""
    data = table.data.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_PE_MAGIC)
        if table.mode == LINE1D:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        else:
            fh.write(struct.pack("<B", 2))
            fh.write(struct.pack("<III", *data.shape))
        fh.write(np.ascontiguousarray(data).tobytes())


def load_pe_table(path: str, patch_size: int | None = None) -> PETable:
    """Read an A2PE file; 2D tables bind patch_size from the caller.

    Raises:
        IOFormatError: on bad magic, size mismatch, or unknown mode byte.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _PE_MAGIC:
        raise IOFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 5:
        raise IOFormatError(f"{path}: truncated header")
    mode_byte = raw[4]
    if mode_byte == 1:
        if len(raw) < 13:
            raise IOFormatError(f"{path}: truncated 1D dims")
        length, dim = struct.unpack_from("<II", raw, 5)
        shape, off, mode = (length, dim), 13, LINE1D
    elif mode_byte == 2:
        if len(raw) < 17:
            raise IOFormatError(f"{path}: truncated 2D dims")
        gh, gw, dim = struct.unpack_from("<III", raw, 5)
        shape, off, mode = (gh, gw, dim), 17, PLANE2D
    else:
        raise IOFormatError(f"{path}: unknown mode byte {mode_byte}")
    expected = off + int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise IOFormatError(
            f"{path}: payload is {len(raw) - off} bytes, expected {expected - off}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=off)
    tensor = torch.from_numpy(data.reshape(shape).copy())
    return PETable(mode, tensor, patch_size=patch_size if mode == PLANE2D else None)
