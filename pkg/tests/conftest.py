import os

import numpy as np
import pytest

from attnreg import dataio, engine

engine.tune_allocator()

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist")


def elementwise_fd(f, x0, h=1e-6):
    """Central finite differences of scalar f(array) at x0, per element."""
    x0 = np.asarray(x0, dtype=np.float64)
    num = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        num[i] = (f(xp) - f(xm)) / (2.0 * h)
    return num


def tensor_fd(scalar_fn, tensor, h=1e-6):
    """Central FD of scalar_fn() wrt every element of a live tensor,
    perturbing tensor.data in place and restoring it."""
    base = tensor.data.copy()
    num = np.zeros(base.shape, dtype=np.float64)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        tensor.data = base.copy()
        tensor.data[i] += h
        fp = scalar_fn()
        tensor.data = base.copy()
        tensor.data[i] -= h
        fm = scalar_fn()
        num[i] = (fp - fm) / (2.0 * h)
    tensor.data = base
    return num


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())


@pytest.fixture(scope="session")
def mnist_raw():
    images, labels = dataio.load_dataset_dir(DATA_DIR)
    return images, labels


@pytest.fixture(scope="session")
def mnist_split(mnist_raw):
    return dataio.split_train_test(*mnist_raw, seed=0)
