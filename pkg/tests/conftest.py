import numpy as np
import pytest

from scoreattn import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default dtype."""
    with T.default_dtype(np.float64):
        yield


def numeric_grad(fn, array, h=1e-6):
    """Central-difference gradient of scalar ``fn()`` w.r.t. every entry of ``array``."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def assert_grads(loss_fn, tensors, rtol=1e-6, atol=1e-8):
    """Compare backprop against central differences for every tensor."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: loss_fn().item(), t.data)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
