"""PSNR and SSIM, the latter with an analytic gradient for training."""

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, w):
    # zero-padded 'same' correlation over the two spatial axes; the window is
    # symmetric so this operator is its own adjoint
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def ssim_map(a, b):
    """Per-pixel, per-channel SSIM map (zero-padded windows at the border)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    w = gaussian_window()
    mu_a = _blur(a, w)
    mu_b = _blur(b, w)
    var_a = _blur(a * a, w) - mu_a**2
    var_b = _blur(b * b, w) - mu_b**2
    cov = _blur(a * b, w) - mu_a * mu_b
    return ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2))


def ssim(a, b, return_grad=False):
    """Mean SSIM over pixels and channels of HxWxC images in [0, 1].

    With ``return_grad`` the gradient of the mean w.r.t. ``a`` is returned too.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check(a, b)
    dtype = np.result_type(a.dtype, np.float32)
    a = a.astype(dtype)
    b = b.astype(dtype)
    w = gaussian_window().astype(dtype)
    mu_a = _blur(a, w)
    mu_b = _blur(b, w)
    var_a = _blur(a * a, w) - mu_a**2
    var_b = _blur(b * b, w) - mu_b**2
    cov = _blur(a * b, w) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * cov + C2
    den1 = mu_a**2 + mu_b**2 + C1
    den2 = var_a + var_b + C2
    smap = (num1 * num2) / (den1 * den2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = np.full_like(smap, 1.0 / smap.size)
    # partials of the map w.r.t. the local statistics
    d_mu_a = g * (2 * mu_b * num2 / (den1 * den2) - smap * 2 * mu_a / den1)
    d_var_a = g * (-smap / den2)
    d_cov = g * (2 * num1 / (den1 * den2))
    # var_a and cov depend on mu_a as well
    d_mu_a_total = d_mu_a - 2 * mu_a * d_var_a - mu_b * d_cov
    grad = _blur(d_mu_a_total, w) + 2 * a * _blur(d_var_a, w) + b * _blur(d_cov, w)
    return value, grad


def mse(a, b):
    _check(np.asarray(a), np.asarray(b))
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def psnr(a, b):
    """Peak signal-to-noise ratio for unit peak; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)
