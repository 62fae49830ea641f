"""MNIST (IDX) and CIFAR-10 (binary batch) readers, standardisation and
batching."""
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from minconv.errors import DegenerateInputError, FormatError, LengthError

DATA_DIR_ENV = "MINCONV_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, standardised
    labels: np.ndarray  # (N,) int64 in [0, 9]
    split: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


def default_data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _open_bytes(path):
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            return gzip.decompress(gz.read_bytes())
        raise FileNotFoundError(f"missing data file {path}")
    data = path.read_bytes()
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def parse_idx(raw, expected_magic):
    """Decode an IDX buffer: big-endian magic, big-endian dims, raw ubytes."""
    if len(raw) < 8:
        raise LengthError("IDX buffer shorter than its header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise LengthError(f"IDX payload has {len(raw) - header} bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path):
    return parse_idx(_open_bytes(path), IDX_IMAGES_MAGIC)


def read_idx_labels(path):
    return parse_idx(_open_bytes(path), IDX_LABELS_MAGIC)


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and conversions)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def _standardize(train, test, axes):
    mean = train.mean(axis=axes, keepdims=True, dtype=np.float64)
    std = np.sqrt(((train - mean.astype(np.float32)) ** 2).mean(axis=axes, keepdims=True, dtype=np.float64))
    mean, std = mean.astype(np.float32), std.astype(np.float32)
    return (train - mean) / std, (test - mean) / std


def load_mnist(directory=None):
    """Return ``(train, test)`` MNIST datasets, standardised by train statistics."""
    directory = Path(directory or default_data_dir())
    raw = {}
    for split, (img, lab) in MNIST_FILES.items():
        images = read_idx_images(directory / img)
        labels = read_idx_labels(directory / lab)
        if images.ndim != 3 or len(images) != len(labels):
            raise FormatError(f"{split}: {images.shape} images vs {labels.shape} labels")
        raw[split] = (images.astype(np.float32)[:, None] / np.float32(255.0), labels.astype(np.int64))
    train_x, test_x = _standardize(raw["train"][0], raw["test"][0], axes=None)
    return Dataset(train_x, raw["train"][1], "train"), Dataset(test_x, raw["test"][1], "test")


def parse_cifar_batch(raw):
    """Split a CIFAR-10 binary batch into ``(labels, images[N, 3, 32, 32])``."""
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"batch of {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label byte {labels.max()} out of range")
    return labels, rec[:, 1:].reshape(-1, 3, 32, 32)


def _cifar_root(directory):
    directory = Path(directory)
    nested = directory / "cifar-10-batches-bin"
    return nested if nested.is_dir() else directory


def load_cifar10(directory=None):
    """Return ``(train, test)`` CIFAR-10 datasets with per-channel standardisation."""
    root = _cifar_root(directory or default_data_dir())
    out = {}
    for split, names in (("train", CIFAR_TRAIN_FILES), ("test", CIFAR_TEST_FILES)):
        parts = [parse_cifar_batch(_open_bytes(root / n)) for n in names]
        labels = np.concatenate([p[0] for p in parts])
        images = np.concatenate([p[1] for p in parts]).astype(np.float32) / np.float32(255.0)
        out[split] = (images, labels)
    train_x, test_x = _standardize(out["train"][0], out["test"][0], axes=(0, 2, 3))
    return Dataset(train_x, out["train"][1], "train"), Dataset(test_x, out["test"][1], "test")


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


def subset(ds: Dataset, n, seed=0):
    """First ``n`` examples after a seeded shuffle."""
    if n is None or n >= len(ds):
        return ds
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return Dataset(ds.images[idx], ds.labels[idx], ds.split)


def epoch_permutation(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size, seed=0, shuffle=True, epoch=0):
    """Yield ``(x, y)`` batches; the order depends only on ``(seed, epoch)``.

    The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise DegenerateInputError("dataset is empty")
    order = epoch_permutation(len(ds), seed, epoch) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]
