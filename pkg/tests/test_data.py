import gzip
import shutil
import struct

import numpy as np
import pytest

from minconv.data import (
    CIFAR_RECORD, CIFAR_TRAIN_FILES, MNIST_FILES, Dataset, batches, epoch_permutation, load_cifar10, load_mnist,
    parse_cifar_batch, parse_idx, read_idx_images, subset, write_idx,
)
from minconv.errors import DegenerateInputError, FormatError, LengthError
from conftest import real_data_dir


def _minimal_idx_labels(path):
    raw = open(path, "rb").read()
    assert raw[:4] == b"\x00\x00\x08\x01"
    n = int.from_bytes(raw[4:8], "big")
    return list(raw[8 : 8 + n])


def test_mnist_loader_on_synthetic_files(syn_mnist):
    train, test = load_mnist(syn_mnist)
    assert train.images.shape == (400, 1, 28, 28) and test.images.shape == (120, 1, 28, 28)
    assert train.images.dtype == np.float32
    assert abs(float(train.images.mean(dtype=np.float64))) < 1e-6
    assert float(train.images.std(dtype=np.float64)) == pytest.approx(1.0, abs=1e-5)
    assert list(train.labels) == _minimal_idx_labels(syn_mnist / MNIST_FILES["train"][1])


def test_test_split_uses_train_statistics(syn_mnist):
    train, test = load_mnist(syn_mnist)
    raw_train = read_idx_images(syn_mnist / MNIST_FILES["train"][0]).astype(np.float64) / 255
    raw_test = read_idx_images(syn_mnist / MNIST_FILES["test"][0]).astype(np.float64) / 255
    m, s = raw_train.mean(), raw_train.std()
    np.testing.assert_allclose(test.images[:, 0], (raw_test - m) / s, atol=1e-5)


def test_mnist_gzip_and_idempotence(syn_mnist, tmp_path):
    for name in (n for pair in MNIST_FILES.values() for n in pair):
        with open(syn_mnist / name, "rb") as src, gzip.open(tmp_path / (name + ".gz"), "wb") as dst:
            shutil.copyfileobj(src, dst)
    a, _ = load_mnist(syn_mnist)
    b, _ = load_mnist(tmp_path)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "ok", np.arange(12, dtype=np.uint8).reshape(3, 2, 2))
    raw = (tmp_path / "ok").read_bytes()
    assert parse_idx(raw, 0x803).shape == (3, 2, 2)
    with pytest.raises(FormatError):
        parse_idx(raw, 0x801)
    with pytest.raises(LengthError):
        parse_idx(raw[:-1], 0x803)
    with pytest.raises(LengthError):
        parse_idx(raw[:6], 0x803)
    with pytest.raises(LengthError):
        parse_idx(struct.pack(">I", 0x803) + b"\x00\x00", 0x803)
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def test_cifar_loader_and_byte_offsets(syn_cifar):
    train, test = load_cifar10(syn_cifar)
    assert len(train) == 250 and len(test) == 60
    assert train.images.shape[1:] == (3, 32, 32)
    assert set(np.unique(train.labels)) <= set(range(10))
    np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3), dtype=np.float64), 0, atol=1e-5)
    np.testing.assert_allclose(train.images.std(axis=(0, 2, 3), dtype=np.float64), 1, atol=1e-4)

    raw = (syn_cifar / CIFAR_TRAIN_FILES[0]).read_bytes()
    labels, imgs = parse_cifar_batch(raw)
    r = np.random.default_rng(0)
    for _ in range(200):
        i, c, y, x = r.integers(len(labels)), r.integers(3), r.integers(32), r.integers(32)
        base = i * CIFAR_RECORD
        assert labels[i] == raw[base]
        assert imgs[i, c, y, x] == raw[base + 1 + c * 1024 + y * 32 + x]


def test_cifar_record_errors(syn_cifar, tmp_path):
    with pytest.raises(FormatError):
        parse_cifar_batch(b"\x00" * (CIFAR_RECORD + 1))
    with pytest.raises(FormatError):
        parse_cifar_batch(b"\x0b" + b"\x00" * (CIFAR_RECORD - 1))
    nested = tmp_path / "cifar-10-batches-bin"
    shutil.copytree(syn_cifar, nested)
    assert len(load_cifar10(tmp_path)[0]) == 250


def _ds(n):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 10, "train")


def test_batches_contract():
    ds = _ds(23)
    plain = list(batches(ds, 5, shuffle=False))
    assert [len(y) for _, y in plain] == [5, 5, 5, 5, 3]
    np.testing.assert_array_equal(np.concatenate([x.ravel() for x, _ in plain]), np.arange(23))
    e0 = np.concatenate([x.ravel() for x, _ in batches(ds, 4, seed=1, epoch=0)])
    e0b = np.concatenate([x.ravel() for x, _ in batches(ds, 4, seed=1, epoch=0)])
    e1 = np.concatenate([x.ravel() for x, _ in batches(ds, 4, seed=1, epoch=1)])
    np.testing.assert_array_equal(e0, e0b)
    assert not np.array_equal(e0, e1)
    assert sorted(e0) == list(range(23)) and sorted(e1) == list(range(23))
    with pytest.raises(ValueError):
        next(batches(ds, 0))
    with pytest.raises(DegenerateInputError):
        next(batches(_ds(0), 2))
    np.testing.assert_array_equal(epoch_permutation(10, 3, 2), epoch_permutation(10, 3, 2))


def test_subset():
    ds = _ds(30)
    s = subset(ds, 7, seed=2)
    assert len(s) == 7 and len(set(s.images.ravel())) == 7
    np.testing.assert_array_equal(s.labels, s.images.ravel().astype(int) % 10)
    assert subset(ds, None) is ds and subset(ds, 100) is ds
    with pytest.raises(FormatError):
        Dataset(np.zeros((2, 1, 1, 1)), np.zeros(3), "train")


def test_real_mnist_counts_if_available():
    d = real_data_dir("mnist")
    if d is None:
        pytest.skip("real MNIST files not present (set MINCONV_DATA_DIR)")
    train, test = load_mnist(d)
    assert (len(train), len(test)) == (60000, 10000)
    assert train.labels[0] == 5


def test_real_cifar_counts_if_available():
    d = real_data_dir("cifar10")
    if d is None:
        pytest.skip("real CIFAR-10 files not present (set MINCONV_DATA_DIR)")
    train, test = load_cifar10(d)
    assert (len(train), len(test)) == (50000, 10000)
