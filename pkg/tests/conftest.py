import numpy as np
import pytest

from ctxspeech.tensor import GradTape, Tensor, backward


def central_difference(fn, arrays, eps=1e-5):
    """Numerical gradient of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def tape_gradients(build, arrays):
    """Analytic gradients of ``build(*tensors)`` (a scalar Tensor)."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = build(*tensors)
    grads = backward(tape, loss)
    return [grads.of(t) for t in tensors]


def check_gradients(build, arrays, tol=1e-4):
    analytic = tape_gradients(build, arrays)
    numeric = central_difference(lambda *xs: build(*[Tensor(x) for x in xs]).item(), arrays)
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
