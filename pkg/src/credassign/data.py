"""CIFAR-10 binary loading, train/val splitting, augmentation and batching.

Binary layout per record (3073 bytes): one label byte, then the 1024-byte
red plane, green plane and blue plane, each 32x32 row-major.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError
from .tensor import make_rng

CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
           "dog", "frog", "horse", "ship", "truck")
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
RECORD_BYTES = 3073
IMAGE_SIZE = 32
CROP_SIZE = 24
MAX_OFFSET = IMAGE_SIZE - CROP_SIZE
CENTER_OFFSET = MAX_OFFSET // 2
MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
VAL_SIZE = 5000
DATA_DIR_ENV = "CREDASSIGN_DATA_DIR"


def class_id(name_or_id) -> int:
    if isinstance(name_or_id, str) and not name_or_id.isdigit():
        try:
            return CLASSES.index(name_or_id.lower())
        except ValueError:
            raise DomainError(f"unknown class {name_or_id!r}") from None
    cid = int(name_or_id)
    if not 0 <= cid < len(CLASSES):
        raise DomainError(f"class id {cid} outside [0, 9]")
    return cid


@dataclass
class Dataset:
    """Images kept as raw bytes (N, 3, 32, 32); ``images()`` scales to [0, 1]."""

    pixels: np.ndarray
    labels: np.ndarray
    split_tag: str
    indices: np.ndarray | None = None  # positions in the source file set

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.indices is None:
            self.indices = np.arange(len(self.labels))
        if len(self.pixels) != len(self.labels):
            raise FormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def images(self, idx=None) -> np.ndarray:
        px = self.pixels if idx is None else self.pixels[idx]
        return px.astype(np.float32) / 255.0

    def select(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.pixels[idx], self.labels[idx], self.split_tag, self.indices[idx])


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}-byte records")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= len(CLASSES):
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    pixels = rec[:, 1:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).copy()
    return pixels, labels


def write_cifar_batch(path, pixels: np.ndarray, labels) -> None:
    """Write records in the CIFAR-10 binary layout (used for fixtures)."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), -1)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    np.concatenate([labels, pixels], axis=1).tofile(path)


def resolve_data_dir(dir_path=None) -> Path:
    dir_path = dir_path or os.environ.get(DATA_DIR_ENV)
    if not dir_path:
        raise ConfigurationError(f"no data directory given (use --data-dir or ${DATA_DIR_ENV})")
    p = Path(dir_path)
    nested = p / "cifar-10-batches-bin"
    if not (p / TEST_FILE).exists() and (nested / TEST_FILE).exists():
        return nested
    return p


def split_indices(n: int, seed: int = 42, val_size: int = VAL_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Fisher-Yates permutation of 0..n-1; the last ``val_size`` go to validation."""
    if not 0 < val_size < n:
        raise ConfigurationError(f"validation size {val_size} invalid for {n} records")
    perm = make_rng(seed, "split").permutation(n)
    return np.sort(perm[:-val_size]), np.sort(perm[-val_size:])


def load_cifar10(dir_path=None, seed: int = 42, val_size: int = VAL_SIZE) -> tuple[Dataset, Dataset, Dataset]:
    root = resolve_data_dir(dir_path)
    parts = [read_cifar_batch(root / f) for f in TRAIN_FILES]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    test_px, test_lab = read_cifar_batch(root / TEST_FILE)
    full = Dataset(pixels, labels, "train")
    tr, va = split_indices(len(full), seed, val_size)
    train = full.select(tr)
    val = full.select(va)
    val.split_tag = "val"
    return train, val, Dataset(test_px, test_lab, "test")


def subset_by_class(dataset: Dataset, cid) -> Dataset:
    cid = class_id(cid)
    return dataset.select(np.flatnonzero(dataset.labels == cid))


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Seeded subset of ``n`` samples, original order preserved."""
    if n >= len(dataset):
        return dataset
    idx = np.sort(make_rng(seed, "subsample").permutation(len(dataset))[:n])
    return dataset.select(idx)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def augment_crop_flip(image: np.ndarray, rng) -> np.ndarray:
    """Random 24x24 crop (offsets 0..8 per axis) and a coin-flip horizontal mirror.

    Draw order is row offset, column offset, flip.
    """
    oy = int(rng.integers(0, MAX_OFFSET + 1))
    ox = int(rng.integers(0, MAX_OFFSET + 1))
    flip = rng.random() < 0.5
    crop = image[:, oy:oy + CROP_SIZE, ox:ox + CROP_SIZE]
    return crop[:, :, ::-1] if flip else crop


def center_crop(images: np.ndarray) -> np.ndarray:
    o = CENTER_OFFSET
    return images[..., o:o + CROP_SIZE, o:o + CROP_SIZE]


def normalize(batch: np.ndarray) -> np.ndarray:
    shape = (1,) * (batch.ndim - 3) + (3, 1, 1)
    return ((batch - MEAN.reshape(shape)) / STD.reshape(shape)).astype(np.float32)


def denormalize(batch: np.ndarray) -> np.ndarray:
    shape = (1,) * (batch.ndim - 3) + (3, 1, 1)
    return (batch * STD.reshape(shape) + MEAN.reshape(shape)).astype(np.float32)


def eval_inputs(dataset: Dataset, idx=None) -> np.ndarray:
    """Center crop + normalize; the augmentation-free evaluation path."""
    return normalize(center_crop(dataset.images(idx)))


class BatchIterator:
    """Iterates one epoch of (inputs, labels) batches.

    Order and augmentation draws are both functions of ``epoch_seed`` only.
    """

    def __init__(self, dataset: Dataset, batch_size: int = 128, augment: bool = True,
                 epoch_seed: int = 0, shuffle: bool = True):
        self.dataset = dataset
        self.batch_size = batch_size
        self.augment = augment
        self.epoch_seed = epoch_seed
        self.shuffle = shuffle

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def __iter__(self):
        n = len(self.dataset)
        order = make_rng(self.epoch_seed, "shuffle").permutation(n) if self.shuffle else np.arange(n)
        aug_rng = make_rng(self.epoch_seed, "augment")
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            imgs = self.dataset.images(idx)
            if self.augment:
                imgs = np.stack([augment_crop_flip(im, aug_rng) for im in imgs])
            else:
                imgs = center_crop(imgs)
            yield normalize(imgs), self.dataset.labels[idx]
