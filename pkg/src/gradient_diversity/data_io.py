"""IDX (MNIST-family) reading/writing, deterministic subsets, synthetic blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# official file names per dataset; the fetch script holds URLs and checksums
IDX_FILES = {
    "mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "fashion": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
}


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    pixels: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Rows of ``X`` are flattened inputs in ``[0, 1]``; ``y`` holds class indices."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    source: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y lengths differ")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.X[i], int(self.y[i]))

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[indices], self.y[indices], self.n_classes, self.source)


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, expected_magic: int, what: str) -> tuple[tuple, np.ndarray]:
    if len(data) < 4:
        raise TruncatedError(f"{what}: file shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{what}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < size:
        raise TruncatedError(f"{what}: expected {size} payload bytes, found {len(data) - header}")
    payload = np.frombuffer(data, dtype=np.uint8, count=size, offset=header)
    return dims, payload.reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10, source: str | None = None) -> Dataset:
    """Read an IDX image file (magic 0x803) and label file (magic 0x801), gzipped or raw.

    Pixels are scaled by 1/255 and flattened.
    """
    _, images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, str(images_path))
    _, labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if labels.size and labels.max() >= n_classes:
        raise IdxFormatError(f"label {labels.max()} outside [0, {n_classes})")
    return Dataset(X, labels.astype(np.int64), n_classes, source or str(images_path))


def write_idx(dataset: Dataset, images_path, labels_path, image_shape: tuple | None = None) -> None:
    """Write ``dataset`` as raw IDX files; pixels are rounded to the nearest ``k/255``."""
    if image_shape is None:
        side = int(round(np.sqrt(dataset.n)))
        image_shape = (side, side) if side * side == dataset.n else (1, dataset.n)
    if len(image_shape) != 2 or int(np.prod(image_shape)) != dataset.n:
        raise ValueError(f"image_shape {image_shape} must be (rows, cols) with rows * cols = {dataset.n}")
    count = len(dataset)
    pixels = np.clip(np.rint(dataset.X * 255.0), 0, 255).astype(np.uint8)
    dims = (count, *image_shape)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, count))
        fh.write(dataset.y.astype(np.uint8).tobytes())


def load_idx_dir(directory, dataset: str = "mnist", split: str = "train") -> Dataset:
    """Load ``split`` of a dataset stored under its official file names (optionally ``.gz``)."""
    directory = Path(directory)
    found = []
    for stem in IDX_FILES[dataset][split]:
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")
    return load_idx(*found, source=f"{dataset}:{split}")


def subset(dataset: Dataset, count: int, seed, stratified: bool = False) -> Dataset:
    """Deterministic sample of ``count`` examples without replacement.

    Stratified sampling allocates ``count`` across classes in proportion to
    their frequency (largest remainders), so each class is within one
    example of its exact share.
    """
    if count > len(dataset) or count < 0:
        raise ValueError(f"cannot draw {count} examples from {len(dataset)}")
    rng = np.random.default_rng(seed)
    if not stratified:
        return dataset.take(np.sort(rng.permutation(len(dataset))[:count]))
    classes, counts = np.unique(dataset.y, return_counts=True)
    share = counts * count / len(dataset)
    alloc = np.floor(share).astype(int)
    short = count - alloc.sum()
    if short:
        order = np.argsort(-(share - alloc), kind="stable")
        alloc[order[:short]] += 1
    picked = []
    for c, a in zip(classes, alloc):
        members = np.flatnonzero(dataset.y == c)
        picked.append(rng.permutation(members)[:a])
    return dataset.take(np.sort(np.concatenate(picked)))


def blob_centers(n: int, n_classes: int) -> np.ndarray:
    """Fixed class centers in ``[0.2, 0.8]^n``; depend only on ``(n, n_classes)``."""
    return np.random.default_rng([n, n_classes, 0xB10B]).uniform(0.2, 0.8, size=(n_classes, n))


def synthetic_blobs(n: int, n_classes: int, per_class: int, spread: float, seed) -> Dataset:
    """Isotropic Gaussian clusters (std ``spread``) around :func:`blob_centers`, clipped to [0, 1]."""
    if n < 2 or n_classes < 2:
        raise ValueError("need n >= 2 and n_classes >= 2")
    if per_class < 1 or spread < 0:
        raise ValueError("per_class must be positive and spread non-negative")
    rng = np.random.default_rng(seed)
    centers = blob_centers(n, n_classes)
    y = np.repeat(np.arange(n_classes), per_class)
    X = centers[y] + spread * rng.standard_normal((y.size, n))
    order = rng.permutation(y.size)
    return Dataset(np.clip(X[order], 0.0, 1.0), y[order], n_classes, f"blobs(n={n},C={n_classes},spread={spread})")


def train_test_split(dataset: Dataset, test_count: int, seed) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    return dataset.take(np.sort(order[test_count:])), dataset.take(np.sort(order[:test_count]))
