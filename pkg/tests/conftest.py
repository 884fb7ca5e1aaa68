import numpy as np
import pytest

from npmerge.data import synth_blobs
from npmerge.nn import MlpSpec, TrainConfig, init_params, train_model
from npmerge.numerics import make_rng


def random_model(widths, batchnorm=None, seed=0):
    """Initialized model with non-trivial biases and BatchNorm parameters."""
    spec = MlpSpec(tuple(widths), tuple(batchnorm or ()))
    model = init_params(spec, seed)
    rng = make_rng(seed + 10_000)
    for layer in model.layers:
        layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
        if layer.bn is not None:
            n = len(layer.bias)
            layer.bn.gamma[:] = 1.0 + 0.2 * rng.standard_normal(n)
            layer.bn.beta[:] = 0.1 * rng.standard_normal(n)
            layer.bn.running_mean[:] = 0.1 * rng.standard_normal(n)
            layer.bn.running_var[:] = 0.5 + rng.random(n)
    return model


def central_difference(f, arr, h=1e-5):
    """Gradient of scalar ``f()`` with respect to ``arr``, perturbing in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


@pytest.fixture(scope="session")
def blob_task():
    ds = synth_blobs(4, 120, 6, 0.6, seed=11, clusters_per_class=2)
    order = make_rng(0).permutation(len(ds))
    return ds.subset(order[:360]), ds.subset(order[360:])


@pytest.fixture(scope="session")
def trained_pair(blob_task):
    """Two independently initialized BN-free MLPs trained on the same small task."""
    train, _ = blob_task
    spec = MlpSpec((6, 24, 24, 4))
    a, _ = train_model(spec, train, TrainConfig(epochs=25, seed=1))
    b, _ = train_model(spec, train, TrainConfig(epochs=25, seed=2))
    return a, b


@pytest.fixture(scope="session")
def trained_bn_pair(blob_task):
    train, _ = blob_task
    spec = MlpSpec((6, 24, 24, 4), (True, True))
    a, _ = train_model(spec, train, TrainConfig(epochs=25, seed=3))
    b, _ = train_model(spec, train, TrainConfig(epochs=25, seed=4))
    return a, b
