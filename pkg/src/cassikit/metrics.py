"""Image-quality metrics: MSE, PSNR (cube-level and band-mean) and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr_from_mse(value: float, peak: float = 1.0) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / value)


def psnr(a, b, peak: float = 1.0) -> float:
    """Cube-level PSNR in dB; ``inf`` for identical inputs."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    return psnr_from_mse(mse(a, b), peak)


def psnr_bands(a, b, peak: float = 1.0) -> list[float]:
    a, b = _pair(a, b)
    return [psnr(a[c], b[c], peak) for c in range(a.shape[0])]


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _valid_filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    half = window.shape[0] // 2
    full = ndimage.correlate(img, window, mode="constant", cval=0.0)
    return full[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim_band(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over the fully interior 11x11 Gaussian windows of one band."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim_band expects 2-D images")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"bands must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = gaussian_window()
    mu_a = _valid_filter(a, win)
    mu_b = _valid_filter(b, win)
    # the three second moments go through identical arithmetic so that
    # ssim(a, a) is exactly one
    var_a = _valid_filter(a * a, win) - mu_a * mu_a
    var_b = _valid_filter(b * b, win) - mu_b * mu_b
    cov = _valid_filter(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> tuple[list[float], float]:
    """Per-band SSIM of two cubes and their arithmetic mean."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    per_band = [ssim_band(a[c], b[c], data_range) for c in range(a.shape[0])]
    return per_band, float(np.mean(per_band))


@dataclass
class QualityReport:
    mse: float
    psnr_cube: float
    psnr_band_mean: float
    ssim_band_mean: float
    psnr_bands: list[float]
    ssim_bands: list[float]


def quality_report(recovered, truth, peak: float = 1.0) -> QualityReport:
    """All metrics at once; SSIM is NaN when the bands are too small for the window."""
    a, b = _pair(recovered, truth)
    bands = psnr_bands(a, b, peak)
    band_mean = math.inf if any(math.isinf(p) for p in bands) else float(np.mean(bands))
    try:
        ssim_list, ssim_mean = ssim(a, b)
    except ValueError:
        ssim_list, ssim_mean = [math.nan] * a.shape[0], math.nan
    return QualityReport(mse(a, b), psnr(a, b, peak), band_mean, ssim_mean, bands, ssim_list)
