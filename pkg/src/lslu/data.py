"""Dataset loaders (CIFAR-10 binary, MNIST IDX, PPM/PGM folders, synthetic) and batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import BadMagic, CorruptRecord, DimensionMismatch, EmptyDataset, FileMissing, LabelOutOfRange

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` with values in [0, 1] and integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionMismatch(f"images must be N,C,H,W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, n: Optional[int], seed: int = 0) -> "Dataset":
        """First ``n`` samples of a seeded permutation (the whole set when n is None)."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _read(path: Path) -> bytes:
    if path.exists():
        raw = path.read_bytes()
    elif path.with_name(path.name + ".gz").exists():
        raw = path.with_name(path.name + ".gz").read_bytes()
    else:
        raise FileMissing(f"missing dataset file {path}")
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def parse_cifar_records(raw: bytes, source: str = "<bytes>") -> tuple:
    if len(raw) % CIFAR_RECORD:
        raise CorruptRecord(f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise CorruptRecord(f"{source}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, split: str = "train") -> Dataset:
    """Parse the standard ``*.bin`` batches: 1 label byte + 3072 CHW pixel bytes per record."""
    directory = Path(directory)
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    missing = [f for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES if not (directory / f).exists()]
    if missing:
        raise FileMissing(f"{directory}: missing CIFAR-10 files {missing}")
    images, labels = [], []
    for name in files:
        im, lb = parse_cifar_records((directory / name).read_bytes(), name)
        images.append(im)
        labels.append(lb)
    images = np.concatenate(images).astype(np.float32) / np.float32(255.0)
    return Dataset(images, np.concatenate(labels), 10, split)


def parse_idx(raw: bytes, magic: int, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise CorruptRecord(f"{source}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"{source}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CorruptRecord(f"{source}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise DimensionMismatch(f"{source}: header declares {dims} ({expected} bytes), payload has {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(directory, split: str = "train") -> Dataset:
    """Read MNIST IDX files (plain or ``.gz``) into ``(N, 1, 28, 28)`` images in [0, 1]."""
    directory = Path(directory)
    img_name, lbl_name = MNIST_FILES["train" if split == "train" else "test"]
    images = parse_idx(_read(directory / img_name), IDX_IMAGES_MAGIC, img_name)
    labels = parse_idx(_read(directory / lbl_name), IDX_LABELS_MAGIC, lbl_name)
    if images.ndim != 3:
        raise DimensionMismatch(f"{img_name}: expected 3 dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise DimensionMismatch(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= 10:
        raise LabelOutOfRange(f"{lbl_name}: label {labels.max()} >= 10")
    images = images[:, None].astype(np.float32) / np.float32(255.0)
    return Dataset(images, labels.astype(np.int64), 10, split)


def load_image_folder(directory, split: str = "train") -> Dataset:
    """Class-per-subdirectory PPM/PGM images; classes are sorted directory names.

    If ``directory/<split>`` exists it is used, so a root with ``train/`` and
    ``test/`` subfolders works as well as a flat class folder.
    """
    from PIL import Image

    root = Path(directory)
    if (root / split).is_dir():
        root = root / split
    if not root.is_dir():
        raise FileMissing(f"image folder {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise EmptyDataset(f"{root}: no class subdirectories")
    images, labels = [], []
    for k, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in (".ppm", ".pgm", ".pnm"):
                continue
            with Image.open(f) as im:
                arr = np.asarray(im)
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            images.append(arr)
            labels.append(k)
    if not images:
        raise EmptyDataset(f"{root}: no PPM/PGM files found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DimensionMismatch(f"{root}: images have differing shapes {sorted(shapes)}")
    maxval = 65535.0 if images[0].dtype == np.uint16 else 255.0
    stacked = np.stack(images).astype(np.float32) / np.float32(maxval)
    return Dataset(stacked, np.array(labels), len(classes), split)


def synthetic_blobs(
    n_classes: int = 2,
    n_per_class: int = 100,
    channels: int = 1,
    height: int = 8,
    width: int = 8,
    seed: int = 0,
    noise: float = 0.05,
    split: str = "train",
) -> Dataset:
    """Per-class smooth template images plus Gaussian pixel noise, clipped to [0, 1].

    Templates depend only on ``seed``; the noise stream also depends on
    ``split``, so train and test share classes but not samples.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    templates = np.empty((n_classes, channels, height, width))
    for k in range(n_classes):
        for c in range(channels):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            sigma = rng.uniform(0.15, 0.35) * max(height, width)
            templates[k, c] = 0.1 + 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    split_id = {"train": 1, "test": 2, "val": 2}.get(split, 3)
    noise_rng = np.random.default_rng([seed, split_id])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = templates[labels]
    if noise:
        images = images + noise * noise_rng.standard_normal(images.shape)
    order = noise_rng.permutation(len(labels))
    images = np.clip(images[order], 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels[order], n_classes, split)


def batches(ds: Dataset, batch_size: int, shuffle_seed: Optional[int] = None, epoch: int = 0) -> Iterator[tuple]:
    """Yield ``(images, labels)``; the permutation depends only on (seed, epoch).

    The final short batch is included.  ``shuffle_seed=None`` keeps dataset order.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def channel_stats(ds: Dataset) -> tuple:
    """Per-channel mean and std over the whole split (float64)."""
    x = ds.images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean, std


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return ((images.astype(np.float64) - mean) / std).astype(dtype)


def load_dataset(kind: str, data_dir=None, split: str = "train", **synthetic) -> Dataset:
    """Dispatch on dataset kind: cifar10, mnist, folder or synthetic."""
    if kind == "cifar10":
        return load_cifar10(data_dir, split)
    if kind == "mnist":
        return load_mnist_idx(data_dir, split)
    if kind == "folder":
        return load_image_folder(data_dir, split)
    if kind == "synthetic":
        return synthetic_blobs(split=split, **synthetic)
    raise ValueError(f"unknown dataset kind {kind!r}")
