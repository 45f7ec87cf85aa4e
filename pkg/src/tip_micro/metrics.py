"""Image quality metrics and residual proxies used by the experiment
drivers: PSNR, SSIM, noise-residual energy, gradient-energy sharpness,
and Spearman rank correlation.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve, convolve1d
from scipy.stats import spearmanr

from .errors import ModelError

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0; identical images cap at 100 dB."""
    if a.shape != b.shape:
        raise ModelError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def to_gray(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma; passthrough for single-channel input."""
    if image.ndim == 2:
        return np.asarray(image, dtype=np.float64)
    return (
        0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    ).astype(np.float64)


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean local SSIM on Rec.601 grayscale with an 11x11 Gaussian window."""
    if a.shape != b.shape:
        raise ModelError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    ga, gb = to_gray(a), to_gray(b)
    if min(ga.shape) < 11:
        raise ModelError(f"image smaller than the 11x11 SSIM window: {ga.shape}")
    win = _ssim_window()

    def smooth(x):
        x = convolve1d(x, win, axis=0, mode="reflect")
        return convolve1d(x, win, axis=1, mode="reflect")

    mu_a, mu_b = smooth(ga), smooth(gb)
    var_a = smooth(ga * ga) - mu_a**2
    var_b = smooth(gb * gb) - mu_b**2
    cov = smooth(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def noise_residual(image: np.ndarray) -> float:
    """Std of the 3x3 Laplacian high-pass response; proxy for residual noise."""
    hp = convolve(to_gray(image), _LAPLACIAN, mode="reflect")
    return float(hp.std())


def gradient_energy(image: np.ndarray) -> float:
    """Mean squared forward-difference gradient; proxy for sharpness."""
    g = to_gray(image)
    gx = np.diff(g, axis=1)
    gy = np.diff(g, axis=0)
    return float(np.mean(gx**2) + np.mean(gy**2))


def spearman(x, y) -> float:
    """Spearman rank correlation with midranks; 0 for constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0
