"""Image-quality metrics: CV, SNR, CNR, SSIM, PSNR and the field correlation
coefficient (COCO), plus region-mask helpers.

All functions take plain float arrays. Degenerate denominators follow the
conventions: zero background spread yields +inf for SNR/CNR, identical images
yield +inf PSNR, zero variance is an error for COCO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError


def _flat(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    return img


def cv(image, mask) -> float:
    """Coefficient of variation inside the mask, percent: 100 * std / mean."""
    img = _flat(image)
    mask = np.asarray(mask, dtype=bool)
    vals = img[mask]
    if vals.size == 0:
        raise DataError("empty region mask")
    mean = vals.mean()
    if mean == 0:
        raise DataError("region mean is zero, CV undefined")
    return float(100.0 * vals.std() / mean)


def snr(image, signal_mask, background_mask) -> float:
    """20*log10(signal mean / background std), decibels."""
    img = _flat(image)
    sig = img[np.asarray(signal_mask, dtype=bool)]
    bg = img[np.asarray(background_mask, dtype=bool)]
    if sig.size == 0 or bg.size == 0:
        raise DataError("empty mask")
    noise = bg.std()
    if noise == 0:
        return math.inf
    mean = sig.mean()
    if mean <= 0:
        raise DataError("signal mean must be positive for SNR")
    return float(20.0 * math.log10(mean / noise))


def cnr(image, region_a, region_b, background_mask) -> float:
    """|mean(a) - mean(b)| / background std."""
    img = _flat(image)
    a = img[np.asarray(region_a, dtype=bool)]
    b = img[np.asarray(region_b, dtype=bool)]
    bg = img[np.asarray(background_mask, dtype=bool)]
    if a.size == 0 or b.size == 0 or bg.size == 0:
        raise DataError("empty mask")
    noise = bg.std()
    if noise == 0:
        return math.inf
    return float(abs(a.mean() - b.mean()) / noise)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_mean(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    views = sliding_window_view(img, w.shape)
    return np.einsum("ijkl,kl->ij", views, w)


def ssim(x, y, peak: Optional[float] = None) -> float:
    """Mean local structural similarity, 11x11 Gaussian windows (sigma 1.5),
    valid positions only; C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L the supplied
    peak or the max over both images."""
    a, b = _flat(x), _flat(y)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise DataError(f"image {a.shape} smaller than the 11x11 window")
    level = float(peak) if peak is not None else float(max(a.max(), b.max()))
    c1 = (0.01 * level) ** 2
    c2 = (0.03 * level) ** 2
    w = _gaussian_window()
    mu_a = _window_mean(a, w)
    mu_b = _window_mean(b, w)
    var_a = _window_mean(a * a, w) - mu_a * mu_a
    var_b = _window_mean(b * b, w) - mu_b * mu_b
    cov = _window_mean(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def psnr(x, y, peak: Optional[float] = None) -> float:
    """10*log10(peak^2 / MSE); y is the reference whose max is the default peak."""
    a, b = _flat(x), _flat(y)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    level = float(peak) if peak is not None else float(b.max())
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    if level <= 0:
        raise DataError("peak must be positive for PSNR")
    return float(10.0 * math.log10(level * level / mse))


def coco(estimated_field, true_field) -> float:
    """Pearson correlation between the two fields over all pixels."""
    a, b = _flat(estimated_field).ravel(), _flat(true_field).ravel()
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        raise DataError("zero variance, correlation undefined")
    return float((da @ db) / denom)


# -- masks ---------------------------------------------------------------------


def masks_from_labels(labels: np.ndarray) -> dict:
    """One boolean mask per distinct integer label."""
    labels = np.asarray(labels)
    return {int(k): labels == k for k in np.unique(labels)}


def otsu_threshold(image) -> float:
    """Histogram threshold maximizing between-class variance (256 bins)."""
    img = _flat(image).ravel()
    lo, hi = img.min(), img.max()
    if hi <= lo:
        raise DataError("degenerate image for thresholding")
    hist, edges = np.histogram(img, bins=256, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centers)
    m_total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (m_total * w0 - m0) ** 2 / (w0 * (1.0 - w0))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(between.argmax())])


def _erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    """3x3 binary erosion; pixels beyond the border count as background."""
    out = mask.copy()
    for _ in range(iterations):
        padded = np.pad(out, 1, constant_values=False)
        windows = sliding_window_view(padded, (3, 3))
        out = windows.all(axis=(2, 3))
    return out


def masks_from_image(image) -> dict:
    """Foreground by Otsu threshold; background is the complement eroded by
    2 pixels to keep transition pixels out of the noise estimate."""
    img = _flat(image)
    t = otsu_threshold(img)
    fg = img > t
    bg = _erode(~fg, 2)
    return {"foreground": fg, "background": bg}


def region_cv(image, labels) -> float:
    """Mean CV across the labeled regions; the homogeneity score for phantoms."""
    vals = [cv(image, m) for m in masks_from_labels(labels).values()]
    return float(np.mean(vals))


# -- reporting -------------------------------------------------------------------


@dataclass
class MetricsReport:
    cv: Optional[float] = None
    snr: Optional[float] = None
    cnr: Optional[float] = None
    ssim: Optional[float] = None
    psnr: Optional[float] = None
    coco: Optional[float] = None

    FIELDS = ("cv", "snr", "cnr", "ssim", "psnr", "coco")

    def as_row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


def aggregate(reports) -> dict:
    """Per-metric (mean, population std) across reports, skipping absent values."""
    out = {}
    for name in MetricsReport.FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            arr = np.array(vals, dtype=np.float64)
            # infinite values (SNR/PSNR sentinels) make the spread undefined
            with np.errstate(invalid="ignore"):
                out[name] = (float(arr.mean()), float(arr.std()))
    return out
