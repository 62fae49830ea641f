import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from minconv import kernels  # noqa: E402
from minconv._backend import HAVE_NUMBA  # noqa: E402
from minconv.synthetic import write_synthetic_cifar10, write_synthetic_mnist  # noqa: E402

BACKENDS = ["numpy"] + (["numba"] if HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per kernel backend."""
    monkeypatch.setattr(kernels, "USE_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def syn_mnist(tmp_path_factory):
    return write_synthetic_mnist(tmp_path_factory.mktemp("mnist"), n_train=400, n_test=120, seed=3)


@pytest.fixture(scope="session")
def syn_cifar(tmp_path_factory):
    return write_synthetic_cifar10(tmp_path_factory.mktemp("cifar"), n_train=250, n_test=60, seed=5)


def real_data_dir(kind):
    """Directory with the real dataset files, or None."""
    from minconv.data import CIFAR_TRAIN_FILES, MNIST_FILES, _cifar_root

    root = os.environ.get("MINCONV_DATA_DIR")
    if not root:
        return None
    d = Path(root)
    if kind == "mnist":
        names = [n for pair in MNIST_FILES.values() for n in pair]
        ok = all((d / n).exists() or (d / (n + ".gz")).exists() for n in names)
        return d if ok else None
    r = _cifar_root(d)
    return d if all((r / n).exists() for n in CIFAR_TRAIN_FILES) else None
