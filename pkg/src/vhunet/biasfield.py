"""Synthetic multiplicative bias fields and piecewise-constant phantoms.

A field is the exponential of a random 2D polynomial over normalized
coordinates, affinely rescaled so its minimum and maximum hit the configured
intensity range exactly. The polynomial basis is either plain monomials
u^a v^b or Legendre products L_a(u) L_b(v), in both cases restricted to total
degree <= order with coefficients drawn uniformly from (-0.5, 0.5).

Phantoms are smooth-blob partitions of the grid: each region is the argmax of
a random Gaussian bump, giving irregular but compact shapes with one distinct
intensity per region. Corruption follows the multiplicative model
corrupted = bias * clean + noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np
from numpy.polynomial import legendre

from .errors import DataError

_BASES = ("random_polynomial", "legendre")


@dataclass
class BiasFieldSpec:
    basis: str = "random_polynomial"
    order: int = 4
    intensity_range: tuple = (0.1, 1.9)
    seed: int = 0

    def validate(self) -> None:
        if self.basis not in _BASES:
            raise DataError(f"unknown field basis '{self.basis}' (expected {_BASES})")
        if self.order < 0:
            raise DataError(f"field order must be >= 0, got {self.order}")
        lo, hi = self.intensity_range
        if not (lo > 0 and hi > lo):
            raise DataError(f"intensity range needs 0 < lo < hi, got [{lo}, {hi}]")


def generate_field(spec: BiasFieldSpec, height: int, width: int) -> np.ndarray:
    """Deterministic [1,H,W] field; min and max equal the configured range."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    u = np.linspace(-1.0, 1.0, height)[:, None]
    v = np.linspace(-1.0, 1.0, width)[None, :]
    r = spec.order

    if spec.basis == "random_polynomial":
        p = np.zeros((height, width))
        for a in range(r + 1):
            for b in range(r + 1 - a):
                c = rng.uniform(-0.5, 0.5)
                p = p + c * (u ** a) * (v ** b)
    else:
        coeffs = np.zeros((r + 1, r + 1))
        for a in range(r + 1):
            for b in range(r + 1 - a):
                coeffs[a, b] = rng.uniform(-0.5, 0.5)
        uu, vv = np.broadcast_arrays(u, v)
        p = legendre.legval2d(uu, vv, coeffs)

    raw = np.exp(p)
    lo, hi = spec.intensity_range
    rmin, rmax = raw.min(), raw.max()
    if rmax > rmin:
        t = (raw - rmin) / (rmax - rmin)
        out = lo * (1.0 - t) + hi * t
    else:
        out = np.full_like(raw, (lo + hi) / 2.0)
    return out[None, :, :]


def corrupt(clean: np.ndarray, field: np.ndarray, noise_sigma: float = 0.0,
            seed: int = 0) -> np.ndarray:
    """Multiplicative corruption: bias * clean, plus optional Gaussian noise."""
    clean = np.asarray(clean, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if clean.shape != field.shape:
        raise DataError(f"shape mismatch: clean {clean.shape} vs field {field.shape}")
    if np.any(field <= 0):
        raise DataError("bias field must be strictly positive")
    out = field * clean
    if noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, size=out.shape)
    return out


@dataclass
class Phantom:
    clean: np.ndarray
    bias: np.ndarray
    corrupted: np.ndarray
    noise_sigma: float
    labels: np.ndarray = dataclass_field(default=None, repr=False)


def _blob_labels(height: int, width: int, n_regions: int,
                 rng: np.random.Generator) -> np.ndarray:
    u = np.linspace(-1.0, 1.0, height)[:, None]
    v = np.linspace(-1.0, 1.0, width)[None, :]
    potentials = np.empty((n_regions, height, width))
    for k in range(n_regions):
        cu = rng.uniform(-0.8, 0.8)
        cv = rng.uniform(-0.8, 0.8)
        sigma = rng.uniform(0.3, 0.8)
        amp = rng.uniform(0.8, 1.2)
        potentials[k] = amp * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * sigma ** 2))
    return potentials.argmax(axis=0)


def make_phantom(height: int, width: int, n_regions: int, seed: int,
                 field_spec: Optional[BiasFieldSpec] = None,
                 noise_sigma: float = 0.0) -> Phantom:
    """Piecewise-constant test image plus its corrupted counterpart.

    Region intensities are distinct values in [0.2, 1.0]; the partition is
    retried with fresh sub-seeds until every region is nonempty.
    """
    if n_regions < 2:
        raise DataError(f"phantom needs at least 2 regions, got {n_regions}")
    labels = None
    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        candidate = _blob_labels(height, width, n_regions, rng)
        if len(np.unique(candidate)) == n_regions:
            labels = candidate
            break
    if labels is None:
        raise DataError(f"could not place {n_regions} nonempty regions at {height}x{width}")

    # strictly increasing jittered levels inside [0.2, 1.0], randomly permuted
    offsets = rng.uniform(0.05, 0.95, size=n_regions)
    levels = 0.2 + 0.8 * (np.arange(n_regions) + offsets) / n_regions
    levels = levels[rng.permutation(n_regions)]
    clean = levels[labels][None, :, :]

    if field_spec is None:
        field_spec = BiasFieldSpec(seed=seed + 1_000_003)
    bias = generate_field(field_spec, height, width)
    corrupted = corrupt(clean, bias, noise_sigma, seed=seed + 7)
    return Phantom(clean=clean, bias=bias, corrupted=corrupted,
                   noise_sigma=noise_sigma, labels=labels)
