"""Reconstruction quality: Gaussian-window SSIM, PSNR, and per-volume averages."""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.util import crop

from app.processing.models import SsimParams, Volume

logger = logging.getLogger(__name__)


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"Expected 2D slices, got {a.ndim} dimensions")
    return a, b


def ssim_map(a: np.ndarray, b: np.ndarray, params: Optional[SsimParams] = None) -> np.ndarray:
    """
    Local SSIM over the valid region, i.e. pixels whose full window lies inside
    the slice. Window statistics are Gaussian-weighted population moments.
    """
    params = params or SsimParams()
    a, b = _check_pair(a, b)
    radius = (params.window - 1) // 2
    if min(a.shape) < params.window:
        raise ValueError(f"Slice {a.shape} is smaller than the {params.window}x{params.window} SSIM window")

    def blur(x: np.ndarray) -> np.ndarray:
        return gaussian_filter(x, sigma=params.sigma, truncate=radius / params.sigma, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b

    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    local = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return crop(local, radius)


def ssim(a: np.ndarray, b: np.ndarray, params: Optional[SsimParams] = None) -> float:
    return float(np.clip(ssim_map(a, b, params).mean(), -1.0, 1.0))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); inf for identical slices."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def volume_mean_ssim(recon: Volume, truth: Volume, params: Optional[SsimParams] = None) -> Tuple[float, List[float]]:
    """Arithmetic mean of per-layer SSIM, and the per-layer values."""
    if not recon.same_shape(truth):
        raise ValueError(f"Volume shape mismatch: {recon.data.shape} vs {truth.data.shape}")
    per_layer = [ssim(recon.layer(i), truth.layer(i), params) for i in range(truth.n3)]
    return float(np.mean(per_layer)), per_layer


def volume_mean_psnr(recon: Volume, truth: Volume, peak: float = 1.0) -> Tuple[float, List[float]]:
    if not recon.same_shape(truth):
        raise ValueError(f"Volume shape mismatch: {recon.data.shape} vs {truth.data.shape}")
    per_layer = [psnr(recon.layer(i), truth.layer(i), peak) for i in range(truth.n3)]
    return float(np.mean(per_layer)), per_layer
