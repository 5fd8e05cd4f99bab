"""Image quality metrics over [0, 1] float images: MSE, PSNR, SSIM."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 99.0
_PSNR_MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 1.0) ** 2
_SSIM_C2 = (0.03 * 1.0) ** 2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images.

    Equals -10 log10(MSE); capped at 99 dB once MSE drops below 1e-10.
    """
    err = mse(a, b)
    if err < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    g = np.exp(-(xs**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> float:
    mu_x = convolve2d(x, win, mode="valid")
    mu_y = convolve2d(y, win, mode="valid")
    var_x = convolve2d(x * x, win, mode="valid") - mu_x**2
    var_y = convolve2d(y * y, win, mode="valid") - mu_y**2
    cov = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity for unit-range images.

    Gaussian window 11 with sigma 1.5, K1 0.01, K2 0.03, dynamic range 1,
    averaged over valid window positions and channels. Accepts (H, W) or
    (H, W, C); needs H, W >= 11.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    vals = [_ssim_channel(a[..., c], b[..., c], win) for c in range(a.shape[2])]
    return float(np.mean(vals))
