import numpy as np
import pytest

from moecnn.autograd import Tensor, default_dtype


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit mode unless they opt into float32 explicitly."""
    with default_dtype("float64"):
        yield


def numeric_grad(f, arrays, eps=1e-5):
    """Central finite-difference gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + eps
            up = f(*arrays)
            a[idx] = old - eps
            down = f(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    # absolute floor keeps near-zero entries from dominating
    return float(np.max(np.abs(analytic - numeric) / np.maximum(scale, 1e-3)))


def gradcheck(build, arrays, eps=1e-5):
    """Compare autograd gradients of ``build(*tensors) -> scalar Tensor`` against finite differences.

    Returns the maximum relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()

    def f(*xs):
        return build(*[Tensor(x) for x in xs]).item()

    numeric = numeric_grad(f, arrays, eps)
    return max(max_rel_error(t.grad, n) for t, n in zip(tensors, numeric))


def module_gradcheck(params, loss_fn, eps=1e-5, max_entries=40, seed=0):
    """Check d loss / d param for a sample of entries of every parameter.

    ``loss_fn()`` must rebuild the graph from the current parameter values.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = rng.permutation(p.data.size)[:max_entries]
        for j in flat:
            idx = np.unravel_index(j, p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + eps
            up = loss_fn().item()
            p.data[idx] = old - eps
            down = loss_fn().item()
            p.data[idx] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, max_rel_error(np.array([analytic[idx]]), np.array([num])))
    return worst
