"""PSNR and SSIM on images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 100.0
_RANGE_TOL = 1e-6


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(a, b):
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    for name, arr in (("a", a), ("b", b)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} has non-finite values")
        if arr.min() < -_RANGE_TOL or arr.max() > 1 + _RANGE_TOL:
            raise ValueError(f"{name} outside [0, 1]: [{arr.min():.4g}, {arr.max():.4g}]")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE), capped at 100 dB for MSE < 1e-10."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x, y, window, c1, c2):
    f = lambda img: convolve2d(img, window, mode="valid")
    mu_x, mu_y = f(x), f(y)
    sxx = f(x * x) - mu_x**2
    syy = f(y * y) - mu_y**2
    sxy = f(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, window_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM (K1=0.01, K2=0.03, data range 1), averaged
    over channels. Accepts (H, W) or (C, H, W)."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[-2:]) < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    window = gaussian_window(window_size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    return float(np.mean([_ssim_channel(a[c], b[c], window, c1, c2) for c in range(a.shape[0])]))
