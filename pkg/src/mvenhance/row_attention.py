"""Multi-view row attention.

Tokens that share a row index across all views form one attention group, an
efficient stand-in for full epipolar attention when viewing directions are
near-horizontal. Pre-layer normalization, multi-head scaled-dot attention and
a residual connection; the positional encoding feeds queries and keys only, so
a zero output projection leaves the map an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch
from .features import FeatureMap, scaled_dot_attention


@dataclass
class RowAttentionParams:
    """Projection matrices for one row-attention layer."""

    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    n_heads: int
    init_record: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            m = getattr(self, name)
            if m.shape != (c, c) or not torch.isfinite(m).all():
                raise ShapeMismatch(f"{name} must be a finite {c}x{c} matrix")
        if c % self.n_heads != 0:
            raise ShapeMismatch(f"n_heads={self.n_heads} does not divide channels={c}")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, channels: int, n_heads: int = 4, seed: int = 0,
             zero_output: bool = False) -> "RowAttentionParams":
        """Seeded scaled-uniform initialization, reproducible across runs."""
        gen = torch.Generator().manual_seed(seed)
        bound = channels ** -0.5

        def draw():
            return (torch.rand((channels, channels), generator=gen, dtype=torch.float64)
                    * 2 - 1) * bound

        wq, wk, wv, wo = draw(), draw(), draw(), draw()
        if zero_output:
            wo = torch.zeros_like(wo)
        return cls(wq=wq, wk=wk, wv=wv, wo=wo, n_heads=n_heads,
                   init_record={"seed": seed, "channels": channels,
                                "n_heads": n_heads, "zero_output": zero_output})

    def tensors(self):
        return [self.wq, self.wk, self.wv, self.wo]


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    # (..., T, C) -> (..., n_heads, T, C/n_heads)
    *lead, t, c = x.shape
    x = x.reshape(*lead, t, n_heads, c // n_heads)
    return x.transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-2, -3)
    *lead, t, nh, hd = x.shape
    return x.reshape(*lead, t, nh * hd)


def row_attention_tensor(x: torch.Tensor, params: RowAttentionParams,
                         pos: torch.Tensor) -> torch.Tensor:
    """Row attention on a raw (V, H, W, C) tensor; see :func:`row_attention`."""
    if x.shape != pos.shape:
        raise ShapeMismatch(
            f"positional grid {tuple(pos.shape)} does not match features {tuple(x.shape)}"
        )
    v, h, w, c = x.shape
    if c != params.channels:
        raise ShapeMismatch(f"params expect {params.channels} channels, features have {c}")
    # group tokens by row: (H, V*W, C)
    tokens = x.permute(1, 0, 2, 3).reshape(h, v * w, c)
    pos_g = pos.permute(1, 0, 2, 3).reshape(h, v * w, c)
    normed = F.layer_norm(tokens, (c,))
    q = _split_heads((normed + pos_g) @ params.wq, params.n_heads)
    k = _split_heads((normed + pos_g) @ params.wk, params.n_heads)
    val = _split_heads(normed @ params.wv, params.n_heads)
    attended = _merge_heads(scaled_dot_attention(q, k, val)) @ params.wo
    out = tokens + attended
    return out.reshape(h, v, w, c).permute(1, 0, 2, 3)


def row_attention(f: FeatureMap, params: RowAttentionParams,
                  pos: torch.Tensor) -> FeatureMap:
    """Attend among tokens sharing a row index across all views.

    Shape-preserving; rows never exchange information with other rows.
    """
    return FeatureMap(row_attention_tensor(f.data, params, pos))


def memory_footprint_estimate(v: int, h_f: int, w_f: int, c: int) -> int:
    """Number of attention-score elements row attention materializes.

    Row attention scores are h_f groups of (v*w_f)^2 pairs, versus
    (v*h_f*w_f)^2 for dense multi-view attention; the ratio documents the
    efficiency claim of restricting attention to rows.
    """
    if min(v, h_f, w_f, c) < 1:
        raise ValueError("dimensions must be positive")
    return h_f * (v * w_f) ** 2
