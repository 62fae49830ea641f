"""Small class-structured stand-ins for MNIST and CIFAR-10, written in the
real on-disk formats so the loaders and CLI can run without downloads.

Each class is a fixed random blob pattern; samples are shifted by up to two
pixels and perturbed with noise.
"""
from pathlib import Path

import numpy as np

from minconv.data import CIFAR_TEST_FILES, CIFAR_TRAIN_FILES, MNIST_FILES, write_idx


def _templates(rng, channels, size, n_classes=10, blobs=4):
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.zeros((n_classes, channels, size, size))
    for k in range(n_classes):
        for c in range(channels):
            for _ in range(blobs):
                cy, cx = rng.uniform(4, size - 4, size=2)
                r = rng.uniform(2.0, 4.5)
                out[k, c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return out / out.max(axis=(1, 2, 3), keepdims=True)


def make_images(n, channels, size, seed=0, noise=0.15, template_seed=1234):
    """Return ``(uint8 images[n, channels, size, size], labels[n])``."""
    templates = _templates(np.random.default_rng(template_seed), channels, size)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    imgs = np.empty((n, channels, size, size))
    shifts = rng.integers(-2, 3, size=(n, 2))
    for i in range(n):
        imgs[i] = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(1, 2))
    imgs += noise * rng.standard_normal(imgs.shape)
    return (np.clip(imgs, 0, 1) * 255).round().astype(np.uint8), labels.astype(np.uint8)


def write_synthetic_mnist(directory, n_train=1000, n_test=200, seed=0):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        imgs, labels = make_images(n, 1, 28, seed=s)
        img_name, lab_name = MNIST_FILES[split]
        write_idx(d / img_name, imgs[:, 0])
        write_idx(d / lab_name, labels)
    return d


def write_synthetic_cifar10(directory, n_train=1000, n_test=200, seed=0):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    per = -(-n_train // len(CIFAR_TRAIN_FILES))
    imgs, labels = make_images(n_train, 3, 32, seed=seed)
    for i, name in enumerate(CIFAR_TRAIN_FILES):
        sl = slice(i * per, min((i + 1) * per, n_train))
        rec = np.concatenate([labels[sl, None], imgs[sl].reshape(-1, 3072)], axis=1)
        (d / name).write_bytes(rec.astype(np.uint8).tobytes())
    imgs, labels = make_images(n_test, 3, 32, seed=seed + 1)
    rec = np.concatenate([labels[:, None], imgs.reshape(-1, 3072)], axis=1)
    (d / CIFAR_TEST_FILES[0]).write_bytes(rec.astype(np.uint8).tobytes())
    return d
