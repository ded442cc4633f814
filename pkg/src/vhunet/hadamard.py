"""Fast Walsh-Hadamard transforms and the thresholding layers built on them.

Transforms use the natural (Sylvester) ordering produced by the recursion
H_2N = [[H_N, H_N], [H_N, -H_N]], computed via in-place butterfly passes in
O(n log n) adds. The 2D forward transform is unnormalized (Y = H_H x H_W);
the inverse carries the full 1/(H*W) factor so that iht2d(ht2d(x)) == x.

Also defined here: the trainable per-position scaling layer, the binary gate
(a hard coefficient selector with blocked gradient) and the semi-soft
shrinkage operator, which zeroes coefficients at or below the threshold and
shrinks the rest by an exponentially decaying amount, continuously in the
coefficient magnitude.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _node, _unbroadcast, mul
from .errors import DataError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class HadamardPlan:
    """Transform descriptor for one power-of-two spatial shape."""

    __slots__ = ("height", "width", "ordering", "inverse_scale")

    def __init__(self, height: int, width: int):
        if not (_is_pow2(height) and _is_pow2(width)):
            raise DataError(f"transform extents must be powers of two, got {height}x{width}")
        self.height = int(height)
        self.width = int(width)
        self.ordering = "natural"
        self.inverse_scale = 1.0 / (height * width)

    def __repr__(self) -> str:
        return f"HadamardPlan({self.height}x{self.width}, {self.ordering})"


def hadamard_matrix(n: int) -> np.ndarray:
    """Explicit H_n in Sylvester order; reference for tests and small oracles."""
    if not _is_pow2(n):
        raise DataError(f"matrix order must be a power of two, got {n}")
    h = np.array([[1.0]])
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]])
    while h.shape[0] < n:
        h = np.kron(h2, h)
    return h


def fwht(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized fast transform along one axis: y = H_n applied to that axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if not _is_pow2(n):
        raise DataError(f"transform length must be a power of two, got {n}")
    y = np.moveaxis(x, axis, -1).copy()
    flat = y.reshape(-1, n)
    h = 1
    while h < n:
        z = flat.reshape(-1, n // (2 * h), 2, h)
        a = z[:, :, 0, :].copy()
        z[:, :, 0, :] += z[:, :, 1, :]
        np.subtract(a, z[:, :, 1, :], out=z[:, :, 1, :])
        h *= 2
    return np.moveaxis(y, -1, axis)


def ifwht(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inverse 1D transform: fwht scaled by 1/n."""
    x = np.asarray(x, dtype=np.float64)
    return fwht(x, axis=axis) / x.shape[axis]


def _ht2d_raw(x: np.ndarray) -> np.ndarray:
    """Butterfly passes along the last two axes of a contiguous array,
    working in place on one copy (no transposes)."""
    y = np.ascontiguousarray(x, dtype=np.float64).copy()
    height, width = y.shape[-2], y.shape[-1]
    h = 1
    while h < width:
        z = y.reshape(-1, width // (2 * h), 2, h)
        a = z[:, :, 0, :]
        b = z[:, :, 1, :]
        t = a - b
        a += b
        b[...] = t
        h *= 2
    h = 1
    while h < height:
        z = y.reshape(-1, height // (2 * h), 2, h, width)
        a = z[:, :, 0]
        b = z[:, :, 1]
        t = a - b
        a += b
        b[...] = t
        h *= 2
    return y


def ht2d(x: Tensor, plan: HadamardPlan) -> Tensor:
    """Forward 2D transform of [..., H, W]; per channel Y = H_H x H_W.

    H_n is symmetric, so the backward pass is the same transform applied to
    the incoming gradient.
    """
    if x.shape[-2] != plan.height or x.shape[-1] != plan.width:
        raise DataError(f"input {x.shape} does not match plan {plan.height}x{plan.width}")
    return _node(_ht2d_raw(x.data), "ht2d", (x,), lambda g: (_ht2d_raw(g),))


def iht2d(y: Tensor, plan: HadamardPlan) -> Tensor:
    """Inverse 2D transform: x = (1/(H*W)) H_H y H_W."""
    if y.shape[-2] != plan.height or y.shape[-1] != plan.width:
        raise DataError(f"input {y.shape} does not match plan {plan.height}x{plan.width}")
    s = plan.inverse_scale
    return _node(_ht2d_raw(y.data) * s, "iht2d", (y,), lambda g: (_ht2d_raw(g) * s,))


class ScalingParams:
    """Per-position multiplicative weights, shared across channels."""

    def __init__(self, height: int, width: int):
        self.theta = Tensor(np.ones((height, width)), requires_grad=True)


class ThresholdParams:
    """Raw threshold parameter; the effective threshold is relu(t_raw) >= 0."""

    def __init__(self, height: int, width: int):
        self.t_raw = Tensor(np.zeros((height, width)), requires_grad=True)


def scale(x: Tensor, theta: Tensor) -> Tensor:
    """Elementwise coefficient scaling, theta broadcast over leading channels."""
    if x.shape[-2:] != theta.shape[-2:]:
        raise DataError(f"scaling shape {theta.shape} does not match input {x.shape}")
    return mul(x, theta)


def gate(x: Tensor, t: Tensor) -> np.ndarray:
    """Binary keep/kill mask: 1 where |x| > t, else 0. Constant in backward."""
    return np.sign(np.maximum(np.abs(x.data) - t.data, 0.0))


def semi_soft(x: Tensor, t: Tensor) -> Tensor:
    """Shrinkage S = gate * sign(x) * (|x| - t*exp(t - |x|)).

    Zero at or below the threshold, continuous at |x| = t, and approaching x
    as |x| grows. The gate and sign factors are constants in backward, so for
    a passed coefficient dS/dx = 1 + t*e^(t-|x|) and dS/dt = -sign(x) *
    e^(t-|x|) * (1 + t); killed coefficients (gate 0, including |x| = t
    exactly) get zero gradient. The exp argument is clamped at 0 (it is
    already <= 0 wherever the gate is open) so dead coefficients with large
    thresholds cannot overflow.
    """
    ax = np.abs(x.data)
    open_gate = np.sign(np.maximum(ax - t.data, 0.0))
    sgn = np.sign(x.data)
    e = np.exp(np.minimum(t.data - ax, 0.0))
    out = open_gate * sgn * (ax - t.data * e)

    def vjp(g):
        grad_x = g * open_gate * (1.0 + t.data * e)
        grad_t = g * open_gate * sgn * (-e * (1.0 + t.data))
        return (grad_x, _unbroadcast(grad_t, t.shape))

    return _node(out, "semi_soft", (x, t), vjp)
