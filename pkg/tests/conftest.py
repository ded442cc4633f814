"""Shared test helpers: finite-difference gradient checking and independent
reference implementations used as oracles."""

import numpy as np
import pytest

from vhunet.autodiff import Tensor


def central_diff(f, tensor: Tensor, index: int, h: float = 1e-5) -> float:
    """Two-sided difference of the scalar f() along one flat component."""
    flat = tensor.data.reshape(-1)
    old = flat[index]
    flat[index] = old + h
    up = float(f().data)
    flat[index] = old - h
    down = float(f().data)
    flat[index] = old
    return (up - down) / (2.0 * h)


def gradcheck(f, tensors, rel: float = 1e-5, h: float = 1e-5,
              max_per_tensor: int = 12, seed: int = 0):
    """Compare analytic gradients of the scalar f() against central
    differences on a sample of components of each tensor."""
    loss = f()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "missing gradient"
        grad = t.grad.reshape(-1)
        n = grad.size
        picks = rng.choice(n, size=min(max_per_tensor, n), replace=False)
        for i in picks:
            fd = central_diff(f, t, int(i), h)
            dev = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, dev)
    assert worst <= rel, f"gradient mismatch: worst relative deviation {worst:.3e}"
    return worst


def hadamard_matrix_reference(n: int) -> np.ndarray:
    """Independent +-1 matrix built by Kronecker doubling."""
    h = np.array([[1.0]])
    base = np.array([[1.0, 1.0], [1.0, -1.0]])
    while h.shape[0] < n:
        h = np.kron(base, h)
    assert h.shape == (n, n)
    return h


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
