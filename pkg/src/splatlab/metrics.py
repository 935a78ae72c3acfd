"""Image quality metrics: PSNR and windowed SSIM.

SSIM follows the classic formulation: an 11x11 Gaussian window (sigma 1.5),
K1=0.01 / K2=0.03 at dynamic range 1, local maps computed in 'valid' mode and
averaged over positions and channels. A gradient variant backpropagates the
mean SSIM to the first image for use inside training losses.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_C1 = (_K1 * 1.0) ** 2
_C2 = (_K2 * 1.0) ** 2


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable windowed average, cropped to the fully-covered region."""
    half = window.size // 2
    out = convolve1d(img, window, axis=0, mode="constant")
    out = convolve1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]

def _scatter_valid(grad: np.ndarray, window: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filter_valid: embed and convolve with the same window."""
    half = window.size // 2
    out = np.zeros(shape, dtype=np.float64)
    out[half:-half, half:-half] = grad
    out = convolve1d(out, window, axis=0, mode="constant")
    out = convolve1d(out, window, axis=1, mode="constant")
    return out


def _check_pair(img: np.ndarray, ref: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    if img.ndim == 2:
        img = img[:, :, None]
        ref = ref[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC images, got shape {img.shape}")
    return img, ref


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; inf when identical."""
    img, ref = _check_pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return np.inf
    return float(10.0 * np.log10(1.0 / mse))


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    value, _ = _ssim_maps(img, ref, with_gradient=False)
    return value


def ssim_with_gradient(img: np.ndarray, ref: np.ndarray):
    """Mean SSIM and its gradient with respect to img (same shape as img)."""
    return _ssim_maps(img, ref, with_gradient=True)


def _ssim_maps(img: np.ndarray, ref: np.ndarray, with_gradient: bool):
    img, ref = _check_pair(img, ref)
    h, w, channels = img.shape
    if h < WINDOW_SIZE or w < WINDOW_SIZE:
        raise ValueError(f"images must be at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {h}x{w}")
    window = gaussian_window()
    total = 0.0
    grad = np.zeros_like(img) if with_gradient else None
    n_positions = (h - WINDOW_SIZE + 1) * (w - WINDOW_SIZE + 1)
    upstream = 1.0 / (n_positions * channels)
    for ch in range(channels):
        x = img[:, :, ch]
        y = ref[:, :, ch]
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        xx = _filter_valid(x * x, window)
        xy = _filter_valid(x * y, window)
        yy = _filter_valid(y * y, window)
        var_x = xx - mu_x**2
        var_y = yy - mu_y**2
        cov = xy - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + _C1
        a2 = 2.0 * cov + _C2
        b1 = mu_x**2 + mu_y**2 + _C1
        b2 = var_x + var_y + _C2
        s = (a1 * a2) / (b1 * b2)
        total += float(np.sum(s)) * upstream
        if with_gradient:
            inv_bb = 1.0 / (b1 * b2)
            g_a1 = upstream * a2 * inv_bb
            g_a2 = upstream * a1 * inv_bb
            g_b1 = -upstream * s / b1
            g_b2 = -upstream * s / b2
            g_cov = 2.0 * g_a2
            g_var_x = g_b2
            g_mu_x = 2.0 * mu_y * g_a1 + 2.0 * mu_x * g_b1 - 2.0 * mu_x * g_var_x - mu_y * g_cov
            g_xx = g_var_x
            g_xy = g_cov
            grad[:, :, ch] = (
                _scatter_valid(g_mu_x, window, (h, w))
                + _scatter_valid(g_xx, window, (h, w)) * 2.0 * x
                + _scatter_valid(g_xy, window, (h, w)) * y
            )
    return total, grad
