import numpy as np
import pytest

from flowad import autodiff as ad


def central_difference(fn, arrays, index, step=1e-5):
    """Numeric gradient of scalar fn(*arrays) w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.ravel()
    target = base[index]
    for i in range(target.size):
        orig = target.ravel()[i]
        target.ravel()[i] = orig + step
        up = fn(*base)
        target.ravel()[i] = orig - step
        down = fn(*base)
        target.ravel()[i] = orig
        flat[i] = (up - down) / (2 * step)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-4, abs_floor=1e-6):
    denom = np.maximum(np.abs(numeric), abs_floor)
    err = np.abs(analytic - numeric) / denom
    assert err.max() < rel, f"max rel grad error {err.max():.3e}"


def check_gradients(make_loss, arrays, rel=1e-4, step=1e-5):
    """Compare backward() gradients against central finite differences.

    `make_loss` maps freshly wrapped Nodes (one per input array) to a scalar
    Node; the numeric oracle re-evaluates it on perturbed copies.
    """
    nodes = [ad.Node(a.copy()) for a in arrays]
    loss = make_loss(*nodes)
    ad.backward(loss)

    def scalar_fn(*vals):
        return float(make_loss(*[ad.Node(v) for v in vals]).value)

    for i, node in enumerate(nodes):
        numeric = central_difference(scalar_fn, arrays, i, step=step)
        assert_grad_close(node.grad, numeric, rel=rel)


@pytest.fixture
def rng():
    from flowad.rng import Xoshiro256

    return Xoshiro256(20260809)
