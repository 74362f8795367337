"""PSNR, SSIM, and training-free wavelet color correction.

All metrics expect images in [0, 1] and compute in float64.
"""

from __future__ import annotations

import numpy as np
import scipy.ndimage

from .errors import ShapeMismatch

PSNR_CAP_DB = 99.0
_REC601 = np.array([0.299, 0.587, 0.114])


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes disagree: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with the canonical Gaussian window and constants.

    Color images are converted to luma with Rec. 601 weights; statistics use
    valid windows only (borders cropped).
    """
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a = a @ _REC601
        b = b @ _REC601
    win = _gaussian_window(window_size, sigma)
    half = window_size // 2

    def filt(x):
        y = scipy.ndimage.convolve1d(x, win, axis=0, mode="nearest")
        y = scipy.ndimage.convolve1d(y, win, axis=1, mode="nearest")
        return y[half:-half, half:-half]

    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# wavelet color correction
# ---------------------------------------------------------------------------

def _haar_forward(x: np.ndarray):
    """One orthonormal 2D Haar level; pads odd extents with the edge value."""
    h, w = x.shape[:2]
    pad_h, pad_w = h % 2, w % 2
    if pad_h or pad_w:
        x = np.pad(x, ((0, pad_h), (0, pad_w)) + ((0, 0),) * (x.ndim - 2),
                   mode="edge")
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a + b - c - d) / 2.0
    hl = (a - b + c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, (lh, hl, hh), (h, w)


def _haar_inverse(ll, details, shape):
    lh, hl, hh = details
    a = (ll + lh + hl + hh) / 2.0
    b = (ll + lh - hl - hh) / 2.0
    c = (ll - lh + hl - hh) / 2.0
    d = (ll - lh - hl + hh) / 2.0
    hh2, ww2 = ll.shape[:2]
    out = np.empty((hh2 * 2, ww2 * 2) + ll.shape[2:], dtype=ll.dtype)
    out[0::2, 0::2] = a
    out[0::2, 1::2] = b
    out[1::2, 0::2] = c
    out[1::2, 1::2] = d
    return out[: shape[0], : shape[1]]


def haar_decompose(img: np.ndarray, levels: int):
    """(coarsest low band, [per-level detail triples], [pre-pad shapes])."""
    ll = np.asarray(img, dtype=np.float64)
    details, shapes = [], []
    for _ in range(levels):
        ll, det, shape = _haar_forward(ll)
        details.append(det)
        shapes.append(shape)
    return ll, details, shapes


def haar_reconstruct(ll: np.ndarray, details, shapes) -> np.ndarray:
    out = ll
    for det, shape in zip(reversed(details), reversed(shapes)):
        out = _haar_inverse(out, det, shape)
    return out


def wavelet_color_fix(output, reference, levels: int = 5) -> np.ndarray:
    """Carry the reference's global color scheme into the output.

    Both images are Haar-decomposed; the output's coarsest low-frequency band
    is replaced by the reference's and the result reconstructed, leaving every
    detail band of the output untouched. Clamped to [0, 1]; float64 result.
    """
    out_img, ref_img = _check_pair(output, reference)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    _, det_out, shapes = haar_decompose(out_img, levels)
    ll_ref, _, _ = haar_decompose(ref_img, levels)
    fixed = haar_reconstruct(ll_ref, det_out, shapes)
    return np.clip(fixed, 0.0, 1.0)


def detail_energy(img, levels: int = 5) -> float:
    """Total squared magnitude of all Haar detail bands (used by tests/CLI)."""
    _, details, _ = haar_decompose(np.asarray(img, dtype=np.float64), levels)
    return float(sum((band ** 2).sum() for det in details for band in det))
