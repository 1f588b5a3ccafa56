"""Image quality metrics and discrete functionals."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from . import grid_ops

PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l2_loss(a, b) -> float:
    """Half the squared l2 distance."""
    a, b = _same_shape(a, b)
    return 0.5 * float(np.sum((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_filter(x: np.ndarray) -> np.ndarray:
    # truncate chosen so the kernel is exactly 11 taps wide
    return ndimage.gaussian_filter(x, sigma=SSIM_SIGMA, truncate=3.5, mode="reflect")


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Uses ``C1 = (0.01 peak)^2``, ``C2 = (0.03 peak)^2`` and symmetric
    boundary extension.  As in the common reference implementation, the
    SSIM map is averaged after cropping a half-window border.
    """
    a, b = _same_shape(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _gaussian_filter(a)
    mu_b = _gaussian_filter(b)
    saa = _gaussian_filter(a * a) - mu_a * mu_a
    sbb = _gaussian_filter(b * b) - mu_b * mu_b
    sab = _gaussian_filter(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    pad = (SSIM_WINDOW - 1) // 2
    return float(np.mean((num / den)[pad:-pad, pad:-pad]))


def mean(u) -> float:
    return float(np.mean(np.asarray(u, dtype=float)))


def _affine_basis(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([np.ones(h * w), cols.ravel(), rows.ravel()], axis=1)


def affine_coefficients(u) -> np.ndarray:
    """Least-squares coefficients ``(c, a_col, a_row)`` of ``c + a_col j + a_row i``."""
    u = np.asarray(u, dtype=float)
    basis = _affine_basis(u.shape)
    coef, *_ = np.linalg.lstsq(basis, u.ravel(), rcond=None)
    return coef


def affine_project(u) -> np.ndarray:
    """Orthogonal projection of an image onto affine functions of the pixel grid."""
    u = np.asarray(u, dtype=float)
    return (_affine_basis(u.shape) @ affine_coefficients(u)).reshape(u.shape)


def tv_value(u, weight=1.0) -> float:
    """Weighted isotropic total variation ``sum w |grad u|``."""
    g = grid_ops.grad(np.asarray(u, dtype=float))
    return float(np.sum(weight * grid_ops.pointwise_norm(g)))


def tgv_value(u, v, alpha0: float, alpha1: float) -> float:
    """``alpha0 sum |grad u - v| + alpha1 sum |sym_grad v|`` at the given ``v``."""
    p, q = grid_ops.tgv_forward(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    return float(
        alpha0 * np.sum(grid_ops.pointwise_norm(p)) + alpha1 * np.sum(grid_ops.tensor_norm(q))
    )
