"""Training objective: reconstruction MSE, a closed-form KL divergence between
zero-mean Laplace distributions over the latent AC coefficients, and a
Laplacian smoothness penalty on the estimated field.

The latent is the final encoder block's Hadamard-domain output. Its per-channel
(0,0) coefficient is the DC term and is exempt from regularization; every other
coefficient is an AC term. The posterior scale is the maximum-likelihood
estimate f = sum|y_ac| / (N-1), where N counts the AC terms plus one, so f is
exactly the mean absolute AC coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, absolute, clip, log
from .errors import DataError

_SCALE_FLOOR = 1e-12


@dataclass
class LossConfig:
    delta: float = 1e-5
    kl_weight: float = 0.01
    smooth_weight: float = 0.1
    # None resolves by delta: very small prior scales make the forward KL's
    # f/delta term explode, so the reversed direction is used below 1e-4
    reverse_kl: Optional[bool] = None

    def validate(self) -> None:
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.kl_weight < 0 or self.smooth_weight < 0:
            raise ValueError("loss weights must be nonnegative")

    def resolved_reverse(self) -> bool:
        if self.reverse_kl is None:
            return self.delta < 1e-4
        return bool(self.reverse_kl)


class LatentStats:
    """Absolute-sum statistic of the latent AC coefficients.

    ``ac_abs_sum`` stays a graph tensor so the KL term backpropagates into the
    encoder; it is a scalar for one latent and a [B] vector for a batch of
    them. ``n_coeffs`` is the per-latent AC count plus one.
    """

    def __init__(self, ac_abs_sum: Tensor, n_coeffs: int):
        if n_coeffs < 2:
            raise DataError(f"latent needs at least one AC coefficient, got N={n_coeffs}")
        self.ac_abs_sum = ac_abs_sum
        self.n_coeffs = int(n_coeffs)

    @property
    def scale_mle(self) -> Tensor:
        return self.ac_abs_sum * (1.0 / (self.n_coeffs - 1))


def latent_stats(latent: Tensor) -> LatentStats:
    """Collect AC statistics from a [C,M,N] Hadamard-domain latent (or a
    [B,C,M,N] batch of them), skipping each channel's (0,0) DC coefficient."""
    if latent.ndim not in (3, 4):
        raise DataError(f"latent must be [[B,]C,M,N], got shape {latent.shape}")
    c, m, n = latent.shape[-3:]
    # zero the DC slot before summing (not total minus DC) so the statistic
    # is exactly independent of the DC coefficients
    mask = np.ones((c, m, n))
    mask[:, 0, 0] = 0.0
    a = absolute(latent) * mask
    total = a.sum() if latent.ndim == 3 else a.sum(axis=(1, 2, 3))
    return LatentStats(total, c * (m * n - 1) + 1)


def scale_mle(ac_coeffs) -> float:
    """Laplace scale MLE of raw AC coefficients: the mean absolute value."""
    data = ac_coeffs.data if isinstance(ac_coeffs, Tensor) else np.asarray(ac_coeffs)
    if data.size == 0:
        raise DataError("scale estimate needs at least one coefficient")
    return float(np.abs(data).mean())


def kl_divergence(stats: LatentStats, delta: float, reverse: bool = False) -> Tensor:
    """Closed-form KL between Laplace(0, f) and the Laplace(0, delta) prior,
    summed over the N-1 AC dimensions:

        forward  KL(q||p) = (N-1) * (f/delta + log(delta/f) - 1)
        reverse  KL(p||q) = (N-1) * (delta/f + log(f/delta) - 1)

    Zero AC energy is kept finite by flooring f at 1e-12.
    """
    n1 = stats.n_coeffs - 1
    f = clip(stats.scale_mle, _SCALE_FLOOR, None)
    if reverse:
        ratio = f * (1.0 / delta)
        per_dim = delta / f + log(ratio) - 1.0
    else:
        ratio = f * (1.0 / delta)
        per_dim = ratio - log(ratio) - 1.0
    return per_dim * float(n1)


def elbo_loss(corrected: Tensor, clean, stats: LatentStats, cfg: LossConfig) -> Tensor:
    """Negative evidence bound: pixel MSE plus the weighted KL term.

    With batched stats the KL is averaged over the batch, matching the
    per-image mean the MSE already takes."""
    clean_t = clean if isinstance(clean, Tensor) else Tensor(clean)
    if corrected.shape != clean_t.shape:
        raise DataError(f"shape mismatch {corrected.shape} vs {clean_t.shape}")
    diff = corrected - clean_t
    mse = (diff * diff).mean()
    kl = kl_divergence(stats, cfg.delta, cfg.resolved_reverse())
    if kl.ndim:
        kl = kl.mean()
    return mse + cfg.kl_weight * kl


def smoothness_penalty(field: Tensor) -> Tensor:
    """Mean squared 5-point Laplacian over the interior of the field."""
    h, w = field.shape[-2], field.shape[-1]
    if h < 3 or w < 3:
        raise DataError(f"smoothness penalty needs extents >= 3, got {h}x{w}")
    up = field[..., :-2, 1:-1]
    down = field[..., 2:, 1:-1]
    left = field[..., 1:-1, :-2]
    right = field[..., 1:-1, 2:]
    center = field[..., 1:-1, 1:-1]
    lap = up + down + left + right - 4.0 * center
    return (lap * lap).mean()


def total_loss(corrected: Tensor, clean, stats: LatentStats, field: Tensor,
               cfg: LossConfig):
    """Full objective; returns (scalar tensor, term breakdown dict)."""
    clean_t = clean if isinstance(clean, Tensor) else Tensor(clean)
    if corrected.shape != clean_t.shape:
        raise DataError(f"shape mismatch {corrected.shape} vs {clean_t.shape}")
    diff = corrected - clean_t
    mse = (diff * diff).mean()
    kl = kl_divergence(stats, cfg.delta, cfg.resolved_reverse())
    if kl.ndim:
        kl = kl.mean()
    smooth = smoothness_penalty(field)
    total = mse + cfg.kl_weight * kl + cfg.smooth_weight * smooth
    parts = {
        "mse": float(mse.data),
        "kl": float(kl.data),
        "smooth": float(smooth.data),
        "total": float(total.data),
    }
    return total, parts
