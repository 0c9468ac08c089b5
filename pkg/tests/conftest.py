import numpy as np
import pytest

from stmamba import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference_check(loss_fn, tensors, step=1e-5, coords=None, rng=None):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``coords`` optionally limits the check to a list of (tensor_index, flat_index).
    Returns the worst relative error.
    """
    for t in tensors:
        t.grad = None
    ad.backward(loss_fn())
    if coords is None:
        coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.size)]
    worst = 0.0
    for i, j in coords:
        t = tensors[i]
        flat = t.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = loss_fn().item()
        flat[j] = orig - step
        down = loss_fn().item()
        flat[j] = orig
        fd = (up - down) / (2 * step)
        an = t.grad.reshape(-1)[j]
        denom = max(abs(fd), abs(an), 1e-6)
        worst = max(worst, abs(fd - an) / denom)
    return worst
