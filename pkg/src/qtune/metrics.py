"""Image quality metrics (PSNR over RGB, SSIM over luma)."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

PEAK = 255.0
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# truncate so the Gaussian window is exactly 11x11 (radius 5)
_TRUNCATE = 5.0 / SSIM_SIGMA


def _check_pair(ref: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """PSNR in dB over all samples; ``inf`` for identical inputs."""
    ref, test = _check_pair(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PEAK**2 / mse)


def luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma of (..., H, W, 3) RGB; 2-D input is returned unchanged."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim >= 3 and rgb.shape[-1] == 3:
        return rgb @ np.array([0.299, 0.587, 0.114])
    return rgb


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean SSIM of the luma planes (11x11 Gaussian window, sigma 1.5)."""
    ref, test = _check_pair(ref, test)
    x, y = luma(ref), luma(test)
    if x.ndim != 2:
        raise ValueError(f"ssim expects a single image, got luma shape {x.shape}")
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2

    def blur(a):
        return gaussian_filter(a, SSIM_SIGMA, mode="reflect", truncate=_TRUNCATE)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def batch_psnr(ref: np.ndarray, test: np.ndarray) -> np.ndarray:
    return np.array([psnr(a, b) for a, b in zip(ref, test)])


def batch_ssim(ref: np.ndarray, test: np.ndarray) -> np.ndarray:
    return np.array([ssim(a, b) for a, b in zip(ref, test)])


def finite_mean(values: np.ndarray, cap: float = 100.0) -> float:
    """Mean with infinite PSNRs replaced by ``cap`` so corpus averages stay finite."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean(np.where(np.isinf(v), cap, v))) if v.size else math.nan
