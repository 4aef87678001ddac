"""Point cloud primitives: normalization, sampling, augmentation, file IO.

Everything here is plain numpy on float64 coordinates. Clouds on disk use
the A2PC format: magic ``A2PC``, uint32 point count, N x 3 little-endian
float32 coordinates, then an optional trailing uint16 label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCloud, InvalidCount, InvalidK, IOFormatError

_MAGIC = b"A2PC"

SHAPE_KINDS = ("sphere", "cube", "torus", "cylinder", "cone")


@dataclass
class PointCloud:
    """A set of 3D points with an optional class label.

    Attributes:
        points: (N, 3) float64 coordinates.
        label: Optional integer class label.
    """

    points: np.ndarray
    label: int | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InvalidCount(f"points must be (N, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise DegenerateCloud("cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class AugmentConfig:
    """Random augmentation ranges applied per sample at train time.

    Attributes:
        scale_range: (lo, hi) for a single uniform isotropic scale factor.
        translate: per-axis translation drawn from U[-translate, translate].
        rotate: whether to rotate by a uniform angle about the vertical
            (y) axis.
    """

    scale_range: tuple[float, float] = (0.8, 1.2)
    translate: float = 0.1
    rotate: bool = True


@dataclass
class ShapeSpec:
    """Recipe for one procedural shape sample.

    Attributes:
        kind: one of SHAPE_KINDS.
        n_points: number of surface samples, at least 8.
        jitter: stddev of isotropic gaussian noise added before
            normalization.
        label: optional class label stamped on the generated cloud.
    """

    kind: str
    n_points: int
    jitter: float = 0.0
    label: int | None = None


def normalize_to_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center a cloud at its centroid and scale the farthest point to norm 1.

    Args:
        cloud: input cloud, at least one point.

    Returns:
        New cloud with zero centroid and max point norm exactly 1.

    Raises:
        DegenerateCloud: if all points coincide (no scale exists).
    """
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = float(np.sqrt((pts * pts).sum(axis=1).max()))
    if radius < 1e-12:
        raise DegenerateCloud("all points coincide; cannot normalize")
    return PointCloud(pts / radius, label=cloud.label)


def fps(points: np.ndarray, m: int) -> np.ndarray:
    """Farthest point sampling.

    The first pick is the point farthest from the centroid; each later pick
    maximizes the minimum distance to the already-chosen set. All ties break
    toward the lowest index, so the result is a pure function of the input.

    Args:
        points: (N, 3) coordinates.
        m: number of samples, 1 <= m <= N.

    Returns:
        (m,) int64 indices into points, in pick order.

    Raises:
        InvalidCount: if m is out of range.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if m < 1 or m > n:
        raise InvalidCount(f"m={m} out of range for {n} points")
    centroid = points.mean(axis=0)
    d = ((points - centroid) ** 2).sum(axis=1)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = int(np.argmax(d))  # argmax takes the first max: lowest index
    min_d = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, ((points - points[nxt]) ** 2).sum(axis=1), out=min_d)
    return chosen


def knn(queries: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors of each query within a reference set.

    Neighbors are ordered by ascending distance; exact distance ties break
    toward the lower reference index.

    Args:
        queries: (M, 3) query coordinates.
        reference: (N, 3) reference coordinates.
        k: neighbor count, 1 <= k <= N.

    Returns:
        (M, k) int64 indices into reference.

    Raises:
        InvalidK: if k is out of range.
    """
    queries = np.asarray(queries, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if k < 1 or k > reference.shape[0]:
        raise InvalidK(f"k={k} out of range for {reference.shape[0]} reference points")
    diff = queries[:, None, :] - reference[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")  # stable: ties keep low index
    return order[:, :k].astype(np.int64)


def _rotation_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def augment(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    """Apply random scale, rotation about y, and translation to a cloud.

    Draw order is fixed (scale, angle if enabled, translation) so a given
    generator state always produces the same transform.

    Args:
        cloud: input cloud.
        cfg: augmentation ranges.
        rng: numpy Generator; consumed deterministically.

    Returns:
        New augmented cloud with the same label.
    """
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi))
    pts = cloud.points * scale
    if cfg.rotate:
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        pts = pts @ _rotation_y(theta).T
    shift = rng.uniform(-cfg.translate, cfg.translate, size=3)
    if cfg.translate != 0.0:
        pts = pts + shift
    return PointCloud(pts, label=cloud.label)


def sample_surface(spec: ShapeSpec, rng: np.random.Generator) -> np.ndarray:
    """Sample raw surface points for a shape, before jitter or normalization.

    Args:
        spec: shape recipe; only kind and n_points are used.
        rng: numpy Generator.

    Returns:
        (n_points, 3) float64 coordinates on the shape surface.

    Raises:
        InvalidCount: if n_points < 8 or kind is unknown.
    """
    n = spec.n_points
    if n < 8:
        raise InvalidCount(f"n_points={n}, need at least 8")
    if spec.kind == "sphere":
        v = rng.standard_normal((n, 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        return v / norms
    if spec.kind == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            mask = axis == a
            other = [i for i in range(3) if i != a]
            pts[mask, a] = sign[mask]
            pts[np.ix_(mask, other)] = uv[mask]
        return pts
    if spec.kind == "torus":
        major, minor = 1.0, 0.4
        u = rng.uniform(0.0, 2.0 * np.pi, size=n)
        v = rng.uniform(0.0, 2.0 * np.pi, size=n)
        ring = major + minor * np.cos(v)
        return np.stack([ring * np.cos(u), minor * np.sin(v), ring * np.sin(u)], axis=1)
    if spec.kind == "cylinder":
        radius, half_h = 0.6, 0.8
        side_area = 2.0 * np.pi * radius * (2.0 * half_h)
        cap_area = 2.0 * np.pi * radius * radius
        on_side = rng.uniform(0.0, 1.0, size=n) < side_area / (side_area + cap_area)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        y_side = rng.uniform(-half_h, half_h, size=n)
        r_cap = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        y_cap = np.where(rng.uniform(0.0, 1.0, size=n) < 0.5, half_h, -half_h)
        r = np.where(on_side, radius, r_cap)
        y = np.where(on_side, y_side, y_cap)
        return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
    if spec.kind == "cone":
        radius, height = 0.7, 1.4
        apex_y = height / 2.0
        slant = np.sqrt(radius * radius + height * height)
        side_area = np.pi * radius * slant
        base_area = np.pi * radius * radius
        on_side = rng.uniform(0.0, 1.0, size=n) < side_area / (side_area + base_area)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        # sqrt makes the density uniform over the unrolled lateral sector
        d = np.sqrt(rng.uniform(0.0, 1.0, size=n))
        r_base = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        r = np.where(on_side, radius * d, r_base)
        y = np.where(on_side, apex_y - height * d, -apex_y)
        return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
    raise InvalidCount(f"unknown shape kind {spec.kind!r}")


def generate_shape(spec: ShapeSpec, seed: int) -> PointCloud:
    """Generate one procedural shape cloud: sample, jitter, normalize.

    The same spec and seed always yield bitwise-identical output.

    Args:
        spec: shape recipe.
        seed: RNG seed.

    Returns:
        Normalized cloud with spec.label attached.
    """
    rng = np.random.default_rng(seed)
    pts = sample_surface(spec, rng)
    if spec.jitter > 0.0:
        pts = pts + spec.jitter * rng.standard_normal(pts.shape)
    return normalize_to_unit_sphere(PointCloud(pts, label=spec.label))


def write_cloud(path: str, cloud: PointCloud) -> None:
    """Write a cloud in A2PC format, appending the label when present."""
    coords = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(coords.tobytes())
        if cloud.label is not None:
            fh.write(struct.pack("<H", int(cloud.label)))


def read_cloud(path: str) -> PointCloud:
    """Read an A2PC file written by write_cloud.

    Raises:
        IOFormatError: on bad magic, truncation, or trailing garbage.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise IOFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise IOFormatError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, 4)
    body = 8 + count * 12
    if len(raw) < body:
        raise IOFormatError(f"{path}: expected {count} points, file truncated")
    pts = np.frombuffer(raw, dtype="<f4", count=count * 3, offset=8)
    pts = pts.reshape(count, 3).astype(np.float64)
    rest = len(raw) - body
    if rest == 0:
        return PointCloud(pts)
    if rest == 2:
        (label,) = struct.unpack_from("<H", raw, body)
        return PointCloud(pts, label=int(label))
    raise IOFormatError(f"{path}: {rest} unexpected trailing bytes")
