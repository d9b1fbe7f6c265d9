"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape or x.ndim != 2:
        raise ValueError(f"images must be 2-D and equal in shape, got {x.shape} and {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``math.inf`` for identical images."""
    if not peak > 0:
        raise ValueError("peak must be > 0")
    x, ref = _pair(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def ssim(x, ref, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully contained Gaussian windows."""
    x, ref = _pair(x, ref)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    h = window // 2

    def filt(img):
        out = correlate1d(correlate1d(img, g, axis=0), g, axis=1)
        return out[h:img.shape[0] - h, h:img.shape[1] - h]

    mx, my = filt(x), filt(ref)
    sxx = filt(x * x) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(x * ref) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
