"""Image metrics for training and evaluation: SSIM, PSNR, and the photometric
training loss (weighted MSE + structural dissimilarity) with its exact
gradient wrt the rendered image.

SSIM is the standard single-scale form: 11x11 Gaussian window (sigma 1.5),
C1 = 0.01^2, C2 = 0.03^2 at dynamic range 1, channel-averaged, with edge
handling by cropping to windows fully inside the image.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0

_offsets = np.arange(SSIM_WIN) - SSIM_WIN // 2
_KERNEL_1D = np.exp(-0.5 * (_offsets / SSIM_SIGMA) ** 2)
_KERNEL_1D /= _KERNEL_1D.sum()
_PAD = SSIM_WIN // 2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Gaussian-window local mean, cropped to fully-covered windows. (H,W,C)."""
    out = correlate1d(img, _KERNEL_1D, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL_1D, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _filter_adjoint(winmap: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of _filter_valid: scatter window-level values back to pixels."""
    full = np.zeros(shape, dtype=np.float64)
    full[_PAD:-_PAD, _PAD:-_PAD] = winmap
    full = correlate1d(full, _KERNEL_1D, axis=0, mode="constant")
    full = correlate1d(full, _KERNEL_1D, axis=1, mode="constant")
    return full


def _ssim_terms(a, b):
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a**2
    var_b = _filter_valid(b * b) - mu_b**2
    cov = _filter_valid(a * b) - mu_a * mu_b
    t1 = 2.0 * mu_a * mu_b + SSIM_C1
    t2 = 2.0 * cov + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, t1, t2, d1, d2


def compute_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM of two same-shape images in [0, 1]."""
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(
            f"images must be at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}"
        )
    _, _, t1, t2, d1, d2 = _ssim_terms(a, b)
    return float(np.mean(t1 * t2 / (d1 * d2)))


def ssim_backward(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM value plus its exact gradient wrt the second image.

    Returns:
        (ssim, d_ssim/d_b) with the gradient shaped like b.
    """
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(
            f"images must be at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}"
        )
    mu_a, mu_b, t1, t2, d1, d2 = _ssim_terms(a, b)
    denom = d1 * d2
    value = float(np.mean(t1 * t2 / denom))

    n_win = t1.size  # windows x channels, each contributing 1/n to the mean
    d_s = 1.0 / n_win
    w_cov = d_s * 2.0 * t1 / denom                     # wrt g*(a*b) via cov
    w_var = d_s * (-t1 * t2) / (denom * d2)            # wrt g*(b*b) via var_b
    w_mu = d_s * (2.0 * mu_a * t2 / denom - 2.0 * mu_b * t1 * t2 / (denom * d1))
    # moment definitions subtract products of means
    w_mu = w_mu - 2.0 * mu_b * w_var - mu_a * w_cov

    grad = (
        _filter_adjoint(w_mu, b.shape)
        + 2.0 * b * _filter_adjoint(w_var, b.shape)
        + a * _filter_adjoint(w_cov, b.shape)
    )
    return value, grad


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for range-[0, 1] images, capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


def loss(target: np.ndarray, rendered: np.ndarray, lam: float = 0.8) -> float:
    """Photometric loss: lam * MSE + (1 - lam) * (1 - SSIM).

    Zero at perfect reconstruction.  With lam == 1 the structural term (and
    its minimum-size requirement) is skipped entirely.
    """
    target, rendered = _check_pair(target, rendered)
    value = lam * float(np.mean((target - rendered) ** 2))
    if lam < 1.0:
        value += (1.0 - lam) * (1.0 - compute_ssim(target, rendered))
    return value


def loss_backward(
    target: np.ndarray, rendered: np.ndarray, lam: float = 0.8
) -> tuple[float, np.ndarray]:
    """Loss value plus its gradient wrt the rendered image."""
    target, rendered = _check_pair(target, rendered)
    diff = rendered - target
    value = lam * float(np.mean(diff**2))
    grad = lam * 2.0 * diff / diff.size
    if lam < 1.0:
        ssim_val, ssim_grad = ssim_backward(target, rendered)
        value += (1.0 - lam) * (1.0 - ssim_val)
        grad -= (1.0 - lam) * ssim_grad
    return value, grad
