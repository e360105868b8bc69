"""Image-quality metrics (MSE, PSNR, SSIM) and the loss-curve stability score.

Images are numpy arrays in ``[0, 1]`` shaped ``(H, W)``, ``(C, H, W)`` or
``(N, C, H, W)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr: float
    ssim: float
    n_images: int


@dataclass(frozen=True)
class StabilityScore:
    value: float
    smoothing: float


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float, max_val: float = 1.0) -> float:
    if value < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / value))


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB."""
    return psnr_from_mse(mse(a, b), max_val)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", views, window)


def _ssim_2d(a: np.ndarray, b: np.ndarray, window: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a ** 2
    var_b = _filter_valid(b * b, window) - mu_b ** 2
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Multi-channel inputs are scored per channel and averaged; a leading batch
    axis is averaged too.  Images smaller than the window get the largest odd
    window that fits.
    """
    a, b = _pair(a, b)
    if a.ndim < 2:
        raise ValueError("ssim needs at least a 2-D image")
    h, w = a.shape[-2:]
    size = min(win_size, h, w)
    if size % 2 == 0:
        size -= 1
    if size < win_size:
        warnings.warn(f"image {h}x{w} smaller than the {win_size}x{win_size} SSIM window; using {size}x{size}")
    window = gaussian_window(size, sigma)
    planes_a = a.reshape(-1, h, w)
    planes_b = b.reshape(-1, h, w)
    return float(np.mean([_ssim_2d(pa, pb, window, data_range) for pa, pb in zip(planes_a, planes_b)]))


def ema(curve: Sequence[float], smoothing: float) -> np.ndarray:
    """``s_t = smoothing * s_{t-1} + (1 - smoothing) * x_t`` with ``s_0 = x_0``."""
    x = np.asarray(curve, dtype=np.float64)
    s = np.empty_like(x)
    s[0] = x[0]
    for t in range(1, len(x)):
        s[t] = smoothing * s[t - 1] + (1.0 - smoothing) * x[t]
    return s


def stability(curve: Sequence[float], smoothing: float = 0.6) -> StabilityScore:
    """Spread of a loss curve around its EMA, relative to its mean magnitude.

    Lower is calmer.  Defined as ``std(x - ema(x)) / mean(|x|)``.
    """
    x = np.asarray(curve, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("stability needs a 1-D curve of length >= 2")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    scale = np.mean(np.abs(x))
    if scale == 0:
        return StabilityScore(0.0, smoothing)
    resid = x - ema(x, smoothing)
    return StabilityScore(float(np.std(resid) / scale), smoothing)


def evaluate_images(outputs, targets) -> MetricReport:
    """Per-image PSNR and SSIM averaged over an ``(N, C, H, W)`` set; MSE over the whole set."""
    outputs, targets = _pair(outputs, targets)
    if outputs.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) arrays, got {outputs.shape}")
    n = outputs.shape[0]
    psnrs = [psnr(o, t) for o, t in zip(outputs, targets)]
    ssims = [ssim(o, t) for o, t in zip(outputs, targets)]
    return MetricReport(mse(outputs, targets), float(np.mean(psnrs)), float(np.mean(ssims)), n)
