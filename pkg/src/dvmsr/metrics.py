"""Y-channel PSNR and SSIM with a boundary crop, on the 8-bit scale."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import ArrayOrImage, ImageError, _pixels, quantize_8bit, rgb_to_y

__all__ = [
    "PSNR_CAP",
    "MetricReport",
    "MetricError",
    "gaussian_window",
    "psnr",
    "ssim",
    "evaluate_pair",
    "cap_psnr",
]

PSNR_CAP = 100.0
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 255.0


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    border_crop: int
    channel_mode: str = "Y"


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def _y255(img: ArrayOrImage, border: int) -> np.ndarray:
    y = _pixels(rgb_to_y(img))[:, :, 0] * 255.0
    if border:
        y = y[border:-border, border:-border]
    return y


def _check_pair(a, b, border):
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise MetricError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    if border < 0 or 2 * border >= min(pa.shape[:2]):
        raise MetricError(f"border {border} too large for {pa.shape[0]}x{pa.shape[1]}")


def psnr(a: ArrayOrImage, b: ArrayOrImage, border: int = 0) -> float:
    """PSNR in dB; identical crops give ``math.inf`` (see :func:`cap_psnr`)."""
    _check_pair(a, b, border)
    diff = _y255(a, border) - _y255(b, border)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: ArrayOrImage, b: ArrayOrImage, border: int = 0) -> float:
    _check_pair(a, b, border)
    x, y = _y255(a, border), _y255(b, border)
    g = gaussian_window()
    if min(x.shape) < g.size:
        raise ImageError(f"SSIM needs a crop of at least {g.size}x{g.size}, got {x.shape}")
    if np.array_equal(x, y):
        return 1.0
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def evaluate_pair(
    sr: ArrayOrImage, hr: ArrayOrImage, border: int, quantize: bool = True
) -> MetricReport:
    """Metrics for a model output; the output is rounded to 8 bits first by default."""
    if quantize:
        sr = quantize_8bit(_pixels(sr)) / 255.0
    return MetricReport(cap_psnr(psnr(sr, hr, border)), ssim(sr, hr, border), border)
