"""Feature-map container, similarity measures, positional encodings, attention.

Token grids are stored as (views, rows, cols, channels) float64 torch tensors;
everything downstream of this module (row attention, epipolar aggregation, the
toy denoiser) consumes that layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidChannelCount, ShapeMismatch


@dataclass
class FeatureMap:
    """V x H x W x C token grid. Treated as immutable once constructed."""

    data: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor):
            self.data = torch.as_tensor(np.asarray(self.data), dtype=torch.float64)
        if self.data.dim() != 4:
            raise ShapeMismatch(f"feature map must be VxHxWxC, got {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ShapeMismatch(f"empty feature map: {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature map contains NaN or Inf")

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def cosine_distance(u, v) -> float:
    """1 - cos(u, v) in [0, 2]; returns the neutral value 1.0 for zero vectors."""
    u = torch.as_tensor(u, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 1.0
    return float(1.0 - torch.dot(u, v) / (nu * nv))


def cosine_distance_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise 1 - cos for rows of ``a`` (N, C) against rows of ``b`` (M, C)."""
    na = torch.linalg.vector_norm(a, dim=1)
    nb = torch.linalg.vector_norm(b, dim=1)
    sim = (a @ b.T) / torch.clamp(na[:, None] * nb[None, :], min=1e-30)
    zero = (na[:, None] < 1e-12) | (nb[None, :] < 1e-12)
    return torch.where(zero, torch.ones_like(sim), 1.0 - sim)


def sincos_encoding(h_f: int, w_f: int, n_views: int, c: int) -> torch.Tensor:
    """Deterministic sine-cosine encoding of (column, view) per token.

    Returns a (n_views, h_f, w_f, c) grid with the first half of the channels
    encoding the column index and the second half the view index; rows are
    intentionally not encoded because attention groups are built per row.
    Channel layout per half: [sin bands | cos bands].
    """
    if c % 4 != 0:
        raise InvalidChannelCount(f"channel count must be divisible by 4, got {c}")
    n_bands = c // 4
    freqs = np.power(10000.0, -np.arange(n_bands, dtype=np.float64) / n_bands)

    def bands(idx: np.ndarray) -> np.ndarray:
        ang = idx[..., None] * freqs  # (..., n_bands)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)

    col_enc = bands(np.arange(w_f, dtype=np.float64))       # (w_f, c/2)
    view_enc = bands(np.arange(n_views, dtype=np.float64))  # (V, c/2)
    grid = np.zeros((n_views, h_f, w_f, c), dtype=np.float64)
    grid[..., : c // 2] = col_enc[None, None, :, :]
    grid[..., c // 2:] = view_enc[:, None, None, :]
    return torch.from_numpy(grid)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(C)) v with arbitrary leading batch dimensions.

    ``q`` is (..., T, C), ``k`` and ``v`` are (..., S, C); the scale uses the
    channel count of the inputs as given (callers pass per-head channels).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(
            f"attention shapes disagree: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}"
        )
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v
