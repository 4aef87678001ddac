"""Procedural classification benchmark: generation, storage, loading.

The benchmark draws five primitive surface classes with per-sample
jitter, split into train and test. Every sample's RNG seed derives
from (dataset seed, split, class, index) through a SeedSequence, so a
dataset is fully reproducible from its spec and regenerating it writes
byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigMismatch, IOFormatError
from .pointcloud import (
    SHAPE_KINDS,
    PointCloud,
    ShapeSpec,
    generate_shape,
    read_cloud,
    write_cloud,
)

MANIFEST_NAME = "dataset.json"


@dataclass
class DatasetSpec:
    """Recipe for one procedural benchmark.

    Attributes:
        classes: shape kinds, one class per kind, in label order.
        n_train: training clouds per class.
        n_test: test clouds per class.
        n_points: points per cloud.
        jitter: surface noise stddev before normalization.
        seed: master seed; all per-sample seeds derive from it.
    """

    classes: tuple[str, ...] = SHAPE_KINDS
    n_train: int = 100
    n_test: int = 50
    n_points: int = 512
    jitter: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        self.classes = tuple(self.classes)
        for kind in self.classes:
            if kind not in SHAPE_KINDS:
                raise ConfigMismatch(
                    f"unknown class {kind!r}; choices: {', '.join(SHAPE_KINDS)}"
                )
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigMismatch("need n_train >= 1 and n_test >= 0")


@dataclass
class Dataset:
    """In-memory split benchmark; points float64, labels int64."""

    train_points: np.ndarray
    train_labels: np.ndarray
    test_points: np.ndarray
    test_labels: np.ndarray
    classes: tuple[str, ...] = SHAPE_KINDS

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def sample_seed(master: int, split: str, class_idx: int, index: int) -> int:
    """Deterministic per-sample seed; stable across platforms."""
    split_id = {"train": 0, "test": 1}[split]
    seq = np.random.SeedSequence([master, split_id, class_idx, index])
    return int(seq.generate_state(1)[0])


def _generate_split(spec: DatasetSpec, split: str, per_class: int):
    points, labels = [], []
    for class_idx, kind in enumerate(spec.classes):
        for index in range(per_class):
            shape = ShapeSpec(kind, spec.n_points, spec.jitter, label=class_idx)
            cloud = generate_shape(shape, sample_seed(spec.seed, split, class_idx, index))
            points.append(cloud.points)
            labels.append(class_idx)
    return np.stack(points), np.array(labels, dtype=np.int64)


def make_benchmark(spec: DatasetSpec) -> Dataset:
    """Generate the full benchmark in memory."""
    train_p, train_l = _generate_split(spec, "train", spec.n_train)
    test_p, test_l = _generate_split(spec, "test", spec.n_test)
    return Dataset(train_p, train_l, test_p, test_l, spec.classes)


def write_benchmark(spec: DatasetSpec, out_dir: str) -> None:
    """Write per-class A2PC clouds plus a split manifest.

    Layout: <out>/train/<kind>_<idx>.a2pc, <out>/test/..., and
    dataset.json listing every file with its label and split. Reruns
    with the same spec produce identical bytes.
    """
    entries = []
    for split, per_class in (("train", spec.n_train), ("test", spec.n_test)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for class_idx, kind in enumerate(spec.classes):
            for index in range(per_class):
                shape = ShapeSpec(kind, spec.n_points, spec.jitter, label=class_idx)
                cloud = generate_shape(
                    shape, sample_seed(spec.seed, split, class_idx, index)
                )
                rel = f"{split}/{kind}_{index:04d}.a2pc"
                write_cloud(os.path.join(out_dir, rel), cloud)
                entries.append({"path": rel, "label": class_idx, "split": split})
    manifest = {
        "classes": list(spec.classes),
        "n_points": spec.n_points,
        "jitter": spec.jitter,
        "seed": spec.seed,
        "files": entries,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_benchmark(root: str) -> Dataset:
    """Load a written benchmark back into memory, manifest order.

    Coordinates come back at the on-disk float32 precision.
    """
    mpath = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(mpath):
        raise IOFormatError(f"{root}: missing {MANIFEST_NAME}")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IOFormatError(f"{mpath}: invalid JSON: {exc}") from exc
    splits = {"train": ([], []), "test": ([], [])}
    for entry in manifest["files"]:
        cloud = read_cloud(os.path.join(root, entry["path"]))
        points, labels = splits[entry["split"]]
        points.append(cloud.points)
        labels.append(int(entry["label"]))
    train_p, train_l = splits["train"]
    test_p, test_l = splits["test"]
    return Dataset(
        np.stack(train_p),
        np.array(train_l, dtype=np.int64),
        np.stack(test_p) if test_p else np.zeros((0, manifest["n_points"], 3)),
        np.array(test_l, dtype=np.int64),
        tuple(manifest["classes"]),
    )


def write_token_csv(
    path: str, coords: np.ndarray, values: np.ndarray, value_name: str = "score"
) -> None:
    """Dump one row per token: x,y,z,<value>; floats via repr for fidelity."""
    coords = np.asarray(coords, dtype=np.float64)
    values = np.asarray(values)
    with open(path, "w") as fh:
        fh.write(f"x,y,z,{value_name}\n")
        for (x, y, z), val in zip(coords, values):
            row = f"{float(x)!r},{float(y)!r},{float(z)!r}"
            if np.issubdtype(values.dtype, np.integer):
                fh.write(f"{row},{int(val)}\n")
            else:
                fh.write(f"{row},{float(val)!r}\n")
