"""Self-contained baseline-JPEG degradation (DCT + quantization round trip).

Entropy coding is lossless and pixel-neutral, so the visible JPEG artifacts
are reproduced exactly by quantizing 8x8 DCT blocks with the standard
quantization tables scaled by the usual quality mapping. No chroma
subsampling (4:4:4); full-range BT.601 YCbCr.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

# Standard baseline quantization tables.
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def quality_scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """Quality 1..100 to a quantization table via the common libjpeg mapping."""
    quality = int(np.clip(quality, 1, 100))
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((base * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _quantize_channel(chan: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = chan.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(chan, ((0, ph), (0, pw)), mode="edge") - 128.0
    hh, ww = padded.shape
    blocks = padded.reshape(hh // 8, 8, ww // 8, 8)
    coeffs = scipy.fft.dctn(blocks, axes=(1, 3), norm="ortho")
    coeffs = np.round(coeffs / table[None, :, None, :]) * table[None, :, None, :]
    out = scipy.fft.idctn(coeffs, axes=(1, 3), norm="ortho")
    return out.reshape(hh, ww)[:h, :w] + 128.0


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Degrade an H x W x 3 image in [0, 1] exactly as a baseline JPEG encode
    followed by decode would at the given quality."""
    x = np.round(np.asarray(img, dtype=np.float64) * 255.0)
    ycc = _rgb_to_ycbcr(x)
    luma_q = quality_scaled_table(LUMA_TABLE, quality)
    chroma_q = quality_scaled_table(CHROMA_TABLE, quality)
    out = np.empty_like(ycc)
    out[..., 0] = _quantize_channel(ycc[..., 0], luma_q)
    out[..., 1] = _quantize_channel(ycc[..., 1], chroma_q)
    out[..., 2] = _quantize_channel(ycc[..., 2], chroma_q)
    rgb = np.round(_ycbcr_to_rgb(out))
    return np.clip(rgb, 0.0, 255.0) / 255.0
