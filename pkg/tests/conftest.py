import numpy as np
import pytest
from hypothesis import settings

from myot2.autodiff import Graph, Tensor, backward

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def numeric_grad(f, arr, h=1e-5, indices=None):
    """Central differences of scalar f() w.r.t. entries of ``arr`` (modified in place)."""
    out = np.zeros_like(arr)
    idx_iter = np.ndindex(arr.shape) if indices is None else indices
    for idx in idx_iter:
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def rel_error(a, b):
    """max |a - b| scaled by the larger gradient magnitude (floored at 1e-8)."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def gradcheck(build, arrays, seed=0, h=1e-5):
    """Compare analytic and numeric gradients of sum(build(*tensors) * c).

    Returns the worst relative error over all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    probe = build(*tensors)
    c = np.random.default_rng(seed).normal(size=probe.shape)

    def f():
        return float((build(*tensors).data * c).sum())

    from myot2.autodiff import ops

    with Graph() as g:
        loss = ops.sum(ops.mul(build(*tensors), Tensor(c)))
    grads = backward(g, loss)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(f, t.data, h)
        worst = max(worst, rel_error(grads[t], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
