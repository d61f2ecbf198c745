"""Identified, labelled datasets: IDX ingestion, synthetic blobs, splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from amnesiac._rng import generator

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Examples with stable ids.

    ``origin_ids`` links each example to the example it was derived from
    (itself, unless it is a relabelled copy).
    """

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    origin_ids: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64)
        labels = np.asarray(self.labels, dtype=np.int64)
        features = np.asarray(self.features, dtype=np.float32)
        origin = ids if self.origin_ids is None else np.asarray(self.origin_ids, dtype=np.uint64)
        n = len(ids)
        if features.shape[0] != n or labels.shape != (n,) or origin.shape != (n,):
            raise ValueError("ids, features, labels and origin_ids differ in length")
        if len(np.unique(ids)) != n:
            raise ValueError("example ids must be unique")
        if n and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        for name, value in (("ids", ids), ("labels", labels), ("features", features), ("origin_ids", origin)):
            object.__setattr__(self, name, _frozen(value))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def take(self, index) -> Dataset:
        """Subset by integer indices or boolean mask, ids preserved."""
        index = np.asarray(index)
        if index.size == 0 and index.dtype != bool:
            index = index.astype(np.int64)
        return Dataset(
            self.ids[index], self.features[index], self.labels[index], self.class_count, self.origin_ids[index]
        )

    def position(self, ids: Iterable[int]) -> np.ndarray:
        """Row indices of the given ids; KeyError for unknown ones."""
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise KeyError(f"unknown example id {e.args[0]}") from None

    def with_labels(self, labels) -> Dataset:
        return Dataset(self.ids, self.features, labels, self.class_count, self.origin_ids)

    def concat(self, other: Dataset) -> Dataset:
        if other.class_count != self.class_count or other.feature_shape != self.feature_shape:
            raise ValueError("datasets are not compatible")
        return Dataset(
            np.concatenate([self.ids, other.ids]),
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.class_count,
            np.concatenate([self.origin_ids, other.origin_ids]),
        )

    def next_id(self) -> int:
        return int(self.ids.max()) + 1 if len(self) else 0


@dataclass(frozen=True)
class Selector:
    """Selects examples by class label or by id set, optionally negated.

    Exactly one of ``class_label`` / ``example_ids`` is populated.
    """

    class_label: int | None = None
    example_ids: frozenset[int] | None = None
    negate: bool = False

    def __post_init__(self):
        if (self.class_label is None) == (self.example_ids is None):
            raise ValueError("exactly one of class_label / example_ids must be given")
        if self.example_ids is not None:
            object.__setattr__(self, "example_ids", frozenset(int(i) for i in self.example_ids))

    @classmethod
    def of_class(cls, label: int) -> Selector:
        return cls(class_label=int(label))

    @classmethod
    def of_examples(cls, ids: Iterable[int]) -> Selector:
        return cls(example_ids=frozenset(int(i) for i in ids))

    @property
    def kind(self) -> str:
        return "class" if self.class_label is not None else "examples"

    def complement(self) -> Selector:
        return Selector(self.class_label, self.example_ids, not self.negate)

    def mask(self, dataset: Dataset) -> np.ndarray:
        if self.class_label is not None:
            m = dataset.labels == self.class_label
        else:
            wanted = np.fromiter(self.example_ids, dtype=np.uint64, count=len(self.example_ids))
            m = np.isin(dataset.ids, wanted)
        return ~m if self.negate else m

    def ids_in(self, dataset: Dataset) -> np.ndarray:
        return dataset.ids[self.mask(dataset)]


# --------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int, expected_dims: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxDimensionError(f"{path}: file too short for a header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    head = 4 + 4 * expected_dims
    if len(raw) < head:
        raise IdxDimensionError(f"{path}: header truncated")
    dims = struct.unpack(f">{expected_dims}I", raw[4:head])
    body = np.frombuffer(raw, dtype=np.uint8, offset=head)
    if body.size != int(np.prod(dims)):
        raise IdxDimensionError(f"{path}: dims {dims} need {int(np.prod(dims))} bytes, found {body.size}")
    return body.reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    Pixels are scaled from [0, 255] to [0, 1]; features have shape
    (1, rows, cols). Ids follow file order.
    """
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    n = images.shape[0]
    return Dataset(np.arange(n, dtype=np.uint64), features, labels.astype(np.int64), class_count)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write features as 8-bit IDX images (values are quantised to k/255).

    Features of shape (d,) become 1 x d images; (c, h, w) requires c == 1.
    """
    shape = dataset.feature_shape
    if len(shape) == 1:
        rows, cols = 1, shape[0]
    elif len(shape) == 2:
        rows, cols = shape
    elif len(shape) == 3 and shape[0] == 1:
        rows, cols = shape[1:]
    else:
        raise IdxDimensionError(f"cannot write features of shape {shape} as IDX images")
    if dataset.class_count > 256:
        raise IdxDimensionError("IDX labels are single bytes")
    pixels = np.clip(np.rint(dataset.features.reshape(len(dataset), rows, cols) * 255.0), 0, 255).astype(np.uint8)
    for path, magic, dims, body in (
        (images_path, IMAGES_MAGIC, (len(dataset), rows, cols), pixels),
        (labels_path, LABELS_MAGIC, (len(dataset),), dataset.labels.astype(np.uint8)),
    ):
        data = struct.pack(f">I{len(dims)}I", magic, *dims) + body.tobytes()
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wb") as f:
            f.write(data)


# --------------------------------------------------------------------------
# synthetic data and splits


def synth_blobs(class_count: int, per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around random unit-scale centres."""
    if class_count < 2:
        raise ValueError("need at least two classes")
    rng = generator(seed, "blobs")
    centres = rng.uniform(-1.0, 1.0, size=(class_count, dim))
    labels = np.repeat(np.arange(class_count), per_class)
    features = centres[labels] + spread * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(
        np.arange(len(labels), dtype=np.uint64), features[order].astype(np.float32), labels[order], class_count
    )


def split(dataset: Dataset, fraction: float, seed: int, stratified: bool = False) -> tuple[Dataset, Dataset]:
    """Seeded disjoint partition; the first part holds ``fraction`` of the data."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = generator(seed, "split")
    n = len(dataset)
    if stratified:
        first = []
        for c in range(dataset.class_count):
            idx = np.flatnonzero(dataset.labels == c)
            idx = idx[rng.permutation(len(idx))]
            first.append(idx[: int(round(fraction * len(idx)))])
        first_idx = np.sort(np.concatenate(first)) if first else np.zeros(0, dtype=np.int64)
    else:
        first_idx = np.sort(rng.permutation(n)[: int(round(fraction * n))])
    mask = np.zeros(n, dtype=bool)
    mask[first_idx] = True
    if mask.all() or not mask.any():
        raise ValueError(f"split of {n} examples at {fraction} leaves one side empty")
    return dataset.take(mask), dataset.take(~mask)


# --------------------------------------------------------------------------
# MNIST discovery

_STANDARD = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
_DESK = ("images-idx3-ubyte", "labels-idx1-ubyte")


def _existing(root: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    return None


def find_mnist(root=None) -> Path | None:
    """Directory holding MNIST IDX files.

    An explicit ``root`` is the only place searched. Otherwise checks
    ``$AMNESIAC_MNIST_DIR``, then ``data/mnist`` next to the source tree.
    """
    import os

    if root is not None:
        candidates = [root]
    else:
        candidates = [os.environ.get("AMNESIAC_MNIST_DIR"), Path(__file__).resolve().parents[2] / "data" / "mnist"]
    for c in candidates:
        if not c:
            continue
        c = Path(c)
        if all(_existing(c, s) for s in _STANDARD[:2]) or all(_existing(c, s) for s in _DESK):
            return c
    return None


def load_mnist(root=None, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """(train, test) MNIST datasets with globally unique ids.

    Uses the standard train/t10k files when present; otherwise splits the
    single image/label pair (stratified, seed 0).
    """
    found = find_mnist(root)
    if found is None:
        where = root if root is not None else "$AMNESIAC_MNIST_DIR or data/mnist"
        raise FileNotFoundError(f"no MNIST IDX files found in {where}; see scripts/prepare_mnist.py")
    if all(_existing(found, s) for s in _STANDARD):
        train = load_idx(_existing(found, _STANDARD[0]), _existing(found, _STANDARD[1]))
        test = load_idx(_existing(found, _STANDARD[2]), _existing(found, _STANDARD[3]))
        test = Dataset(test.ids + np.uint64(len(train)), test.features, test.labels, test.class_count)
        return train, test
    full = load_idx(_existing(found, _DESK[0]), _existing(found, _DESK[1]))
    test, train = split(full, test_fraction, seed=0, stratified=True)
    return train, test
