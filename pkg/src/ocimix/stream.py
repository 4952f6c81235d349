"""Datasets, disjoint-class task splits and the one-shot batch stream."""
from __future__ import annotations

import csv
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IngestionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Example:
    features: np.ndarray
    label: int
    uid: int = -1
    split: str = "train"


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    train_examples: tuple[Example, ...]
    test_examples: tuple[Example, ...]


@dataclass(frozen=True)
class StreamBatch:
    examples: tuple[Example, ...]
    task_id: int
    batch_index: int

    @property
    def features(self) -> np.ndarray:
        return np.stack([e.features for e in self.examples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=int)

    def __len__(self):
        return len(self.examples)


def split_into_tasks(dataset, classes_per_task: int, seed) -> list[TaskSpec]:
    """Randomly partition the classes of ``dataset`` into equally sized tasks.

    Examples keep their train/test membership.  Task order is the order of
    the shuffled class list.
    """
    if classes_per_task < 1:
        raise ValueError("classes_per_task must be positive")
    classes = sorted({e.label for e in dataset})
    if not classes or len(classes) % classes_per_task:
        raise ValueError(
            f"{len(classes)} classes cannot be split into tasks of {classes_per_task}"
        )
    order = np.random.default_rng(seed).permutation(classes)
    by_class: dict[int, list[Example]] = {c: [] for c in classes}
    for e in dataset:
        by_class[e.label].append(e)
    tasks = []
    for t in range(len(classes) // classes_per_task):
        ids = tuple(int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task])
        members = [e for c in ids for e in by_class[c]]
        tasks.append(TaskSpec(
            task_id=t,
            class_ids=ids,
            train_examples=tuple(e for e in members if e.split == "train"),
            test_examples=tuple(e for e in members if e.split == "test"),
        ))
    return tasks


def stream_batches(task: TaskSpec, batch_size: int, seed) -> Iterator[StreamBatch]:
    """Yield the task's training set once, shuffled, in batches.

    This is a generator: once a batch is consumed it cannot be requested again.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(task.train_examples))
    for b, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start:start + batch_size]
        yield StreamBatch(tuple(task.train_examples[i] for i in idx), task.task_id, b)


# ---------------------------------------------------------------- IDX files

def _read_idx(path, magic: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IngestionError(f"{path}: too short for an IDX {what} header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IngestionError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) != expected:
        raise IngestionError(
            f"{path}: expected {expected} data bytes for dims {dims}, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", uid_offset: int = 0) -> list[Example]:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    pixels = images.astype(np.float64) / 255.0
    return [
        Example(pixels[i], int(labels[i]), uid_offset + i, split)
        for i in range(len(labels))
    ]


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">II", IDX_IMAGES_MAGIC, images.shape[0]))
        f.write(struct.pack(">II", *images.shape[1:]))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------- synthetic blobs

def gen_gaussian_blobs(class_count, dim, separation, per_class_train, per_class_test,
                       seed, std=1.0, image_shape=None) -> list[Example]:
    """Isotropic Gaussian classes with random means of norm ``separation``.

    Train and test are drawn from the same per-class distribution.  The whole
    set is then mapped into [0, 1] by one global affine rescale, which keeps
    the geometry (and hence nearest-mean decisions) intact.  ``image_shape``
    optionally reshapes each vector, e.g. ``(8, 8)`` for dim 64.
    """
    if class_count < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("need at least 2 dimensions")
    if separation <= 0 or std <= 0:
        raise ValueError("separation and std must be positive")
    if per_class_train < 1 or per_class_test < 0:
        raise ValueError("bad per-class sample counts")
    if image_shape is not None and int(np.prod(image_shape)) != dim:
        raise ValueError(f"image_shape {image_shape} does not hold {dim} values")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((class_count, dim))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    n = per_class_train + per_class_test
    points = means[:, None, :] + std * rng.standard_normal((class_count, n, dim))
    lo, hi = points.min(), points.max()
    points = (points - lo) / (hi - lo)
    shape = tuple(image_shape) if image_shape is not None else (dim,)
    out = []
    for c in range(class_count):
        for k in range(n):
            split = "train" if k < per_class_train else "test"
            out.append(Example(points[c, k].reshape(shape), c, len(out), split))
    return out


def export_csv(dataset, path) -> None:
    """Header ``label,f0..f{dim-1}``; features flattened row-major.

    Train and test sets go to separate files; the split is not stored.
    """
    dim = dataset[0].features.size
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"f{i}" for i in range(dim)])
        for e in dataset:
            w.writerow([e.label] + [repr(float(v)) for v in e.features.ravel()])


def import_csv(path, split="train", feature_shape=None, uid_offset=0) -> list[Example]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise IngestionError(f"{path}: header must start with 'label'")
        for row in reader:
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {len(out) + 1} has {len(row)} fields")
            x = np.array([float(v) for v in row[1:]])
            if feature_shape is not None:
                x = x.reshape(feature_shape)
            out.append(Example(x, int(row[0]), uid_offset + len(out), split))
    return out
