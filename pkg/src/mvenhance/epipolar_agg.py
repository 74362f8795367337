"""Near-view epipolar feature aggregation.

For every token of a view, find its best-matching token along the epipolar
line in each of the two azimuth-adjacent views (cosine distance, hard argmin),
blend the two matches with a hybrid camera-distance / feature-similarity
weight, and fuse the result with the original features by 0.5 averaging.

The argmin is discrete; gradients are routed with a straight-through rule:
the selected indices are treated as constant, gradients flow through the
gather, the fusion, and the weight's dependence on the matched-token
similarities, never through the index choice itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateCameraPair, MissingForwardRecord, ShapeMismatch
from .features import cosine_distance_matrix
from .geometry import FundamentalMatrix

DEFAULT_BAND_EPS = 0.75  # token units; covers rasterization of a 1-token band


@dataclass
class CorrespondenceMap:
    """Per-token best match in a neighbor view; -1 marks tokens with no match."""

    rows: np.ndarray  # (H_f, W_f) int64, target row or -1
    cols: np.ndarray  # (H_f, W_f) int64, target col or -1
    neighbor: int
    eps: float

    @property
    def valid(self) -> np.ndarray:
        return self.rows >= 0


@dataclass
class HybridWeightField:
    """Token-wise blend weights plus the quantities they were derived from."""

    w: np.ndarray        # (H_f, W_f) in [0, 1]
    w_d: float           # camera-distance weight in [0, 1]
    s_prev: np.ndarray   # raw cosine similarity of matched prev tokens, [-1, 1]
    s_next: np.ndarray


@dataclass
class AggregatedSlice:
    """Result of aggregating neighbor features for one view."""

    values: torch.Tensor    # (H_f, W_f, C)
    fallback: np.ndarray    # (H_f, W_f) bool, True where both neighbors missing


@dataclass
class EpipolarFuseRecord:
    """Forward record consumed by :func:`ste_backward`."""

    inputs: tuple          # leaf tensors (f_v, f_prev, f_next) with grad enabled
    similarities: tuple    # in-graph raw similarity tensors (s_prev, s_next)
    fused: torch.Tensor    # in-graph fused output
    map_prev: CorrespondenceMap
    map_next: CorrespondenceMap
    weights: HybridWeightField
    extras: dict = field(default_factory=dict)


@dataclass
class SteGradients:
    f_v: torch.Tensor
    f_prev: torch.Tensor
    f_next: torch.Tensor
    s_prev: torch.Tensor
    s_next: torch.Tensor


def _token_lines(fmat: np.ndarray, h: int, w: int) -> np.ndarray:
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    xx, yy = np.meshgrid(cols, rows)
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)], axis=1)
    return pts @ fmat.T  # (h*w, 3)


def correspondence_map(f_v: torch.Tensor, f_k: torch.Tensor,
                       f_mat: FundamentalMatrix, eps: float = DEFAULT_BAND_EPS,
                       neighbor: int = -1) -> CorrespondenceMap:
    """Hard argmin of cosine distance over the epipolar band of every token.

    ``f_mat`` must be expressed in token-grid coordinates (see
    :func:`mvenhance.geometry.token_fundamental_matrix`). Ties break to the
    lowest row-major target index; tokens whose band is empty map to -1.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    f_v = torch.as_tensor(f_v, dtype=torch.float64).detach()
    f_k = torch.as_tensor(f_k, dtype=torch.float64).detach()
    if f_v.shape[-1] != f_k.shape[-1]:
        raise ShapeMismatch(
            f"channel counts differ: {f_v.shape[-1]} vs {f_k.shape[-1]}"
        )
    hs, ws = f_v.shape[0], f_v.shape[1]
    ht, wt = f_k.shape[0], f_k.shape[1]

    lines = _token_lines(np.asarray(f_mat.m, dtype=np.float64), hs, ws)
    norm = np.hypot(lines[:, 0], lines[:, 1])
    ok = norm >= 1e-12
    lines[ok] /= norm[ok, None]

    cols = np.arange(wt, dtype=np.float64)
    rows = np.arange(ht, dtype=np.float64)
    xx, yy = np.meshgrid(cols, rows)
    tgt = np.stack([xx.ravel(), yy.ravel(), np.ones(ht * wt)], axis=1)
    dist = np.abs(lines @ tgt.T)  # (hs*ws, ht*wt)
    band = (dist <= eps) & ok[:, None]

    feat_dist = cosine_distance_matrix(
        f_v.reshape(-1, f_v.shape[-1]), f_k.reshape(-1, f_k.shape[-1])
    ).numpy()
    feat_dist = np.where(band, feat_dist, np.inf)
    best = feat_dist.argmin(axis=1)  # first minimum == lowest row-major index
    valid = band.any(axis=1)
    t_rows = np.where(valid, best // wt, -1).reshape(hs, ws)
    t_cols = np.where(valid, best % wt, -1).reshape(hs, ws)
    return CorrespondenceMap(rows=t_rows.astype(np.int64), cols=t_cols.astype(np.int64),
                             neighbor=neighbor, eps=eps)


def geometric_weight(poses, v: int) -> float:
    """Camera-distance weight of the previous ring neighbor of view ``v``.

    Views are assumed sorted by azimuth and closed into a ring; the weight is
    d(v, v+1) / (d(v, v-1) + d(v, v+1)), so a closer previous neighbor earns a
    larger share.
    """
    n = len(poses)
    if n < 3:
        raise ValueError(f"ring neighbors need at least 3 views, got {n}")
    c = poses[v].center
    d_prev = float(np.linalg.norm(c - poses[(v - 1) % n].center))
    d_next = float(np.linalg.norm(c - poses[(v + 1) % n].center))
    if d_prev + d_next < 1e-12:
        raise DegenerateCameraPair("both ring neighbors coincide with the view's camera")
    return d_next / (d_prev + d_next)


def hybrid_weight(w_d, s_prev, s_next):
    """Distance weight modulated token-wise by matched-feature similarity.

    Similarities are clamped to [0, 1] first; a vanishing denominator falls
    back to the pure distance weight. Works on scalars or arrays.
    """
    w_d = np.asarray(w_d, dtype=np.float64)
    sp = np.clip(np.asarray(s_prev, dtype=np.float64), 0.0, 1.0)
    sn = np.clip(np.asarray(s_next, dtype=np.float64), 0.0, 1.0)
    denom = sp * w_d + (1.0 - w_d) * sn
    safe = np.where(denom < 1e-12, 1.0, denom)
    w = np.where(denom < 1e-12, w_d, sp * w_d / safe)
    if w.ndim == 0:
        return float(w)
    return w


def _gather(f: torch.Tensor, cmap: CorrespondenceMap) -> torch.Tensor:
    rows = torch.from_numpy(np.clip(cmap.rows, 0, None))
    cols = torch.from_numpy(np.clip(cmap.cols, 0, None))
    return f[rows, cols]


def _matched_similarity(f_v: torch.Tensor, gathered: torch.Tensor) -> torch.Tensor:
    """Differentiable cosine similarity between each token and its match."""
    num = (f_v * gathered).sum(-1)
    na = torch.linalg.vector_norm(f_v, dim=-1)
    nb = torch.linalg.vector_norm(gathered, dim=-1)
    denom = na * nb
    bad = (na < 1e-12) | (nb < 1e-12)
    safe = torch.where(bad, torch.ones_like(denom), denom)
    return torch.where(bad, torch.zeros_like(num), num / safe)


def hybrid_weight_field(f_v: torch.Tensor, f_prev: torch.Tensor, f_next: torch.Tensor,
                        m_prev: CorrespondenceMap, m_next: CorrespondenceMap,
                        w_d: float) -> HybridWeightField:
    """Token-wise hybrid weights from matched-token similarities."""
    s_prev = _matched_similarity(f_v.detach(), _gather(f_prev.detach(), m_prev)).numpy()
    s_next = _matched_similarity(f_v.detach(), _gather(f_next.detach(), m_next)).numpy()
    s_prev = np.where(m_prev.valid, s_prev, 0.0)
    s_next = np.where(m_next.valid, s_next, 0.0)
    return HybridWeightField(w=np.asarray(hybrid_weight(w_d, s_prev, s_next)),
                             w_d=float(w_d), s_prev=s_prev, s_next=s_next)


def aggregate(f_prev: torch.Tensor, f_next: torch.Tensor,
              m_prev: CorrespondenceMap, m_next: CorrespondenceMap,
              weights: HybridWeightField) -> AggregatedSlice:
    """Blend matched tokens of the two neighbors into one view slice.

    Tokens with a single valid match take that side with weight 1; tokens with
    no match are flagged as fallback and the consumer substitutes the view's
    own features.
    """
    if f_prev.shape != f_next.shape:
        raise ShapeMismatch(
            f"neighbor slices disagree: {tuple(f_prev.shape)} vs {tuple(f_next.shape)}"
        )
    a = _gather(f_prev, m_prev)
    b = _gather(f_next, m_next)
    vp = torch.from_numpy(m_prev.valid)
    vn = torch.from_numpy(m_next.valid)
    w = torch.from_numpy(np.asarray(weights.w, dtype=np.float64))[..., None]
    both = (vp & vn)[..., None]
    only_p = (vp & ~vn)[..., None]
    only_n = (~vp & vn)[..., None]
    values = torch.where(both, w * a + (1.0 - w) * b,
                         torch.where(only_p, a,
                                     torch.where(only_n, b, torch.zeros_like(a))))
    return AggregatedSlice(values=values, fallback=(~(m_prev.valid | m_next.valid)))


def fuse(f_v: torch.Tensor, aggregated) -> torch.Tensor:
    """0.5 * f_v + 0.5 * aggregated, passing f_v through at fallback tokens."""
    if isinstance(aggregated, AggregatedSlice):
        values, fallback = aggregated.values, aggregated.fallback
    else:
        values, fallback = aggregated, None
    if values.shape != f_v.shape:
        raise ShapeMismatch(
            f"fuse shapes disagree: {tuple(f_v.shape)} vs {tuple(values.shape)}"
        )
    mixed = 0.5 * f_v + 0.5 * values
    if fallback is None or not fallback.any():
        return mixed
    keep = torch.from_numpy(fallback)[..., None]
    return torch.where(keep, f_v, mixed)


def _fuse_graph(f_v: torch.Tensor, f_prev: torch.Tensor, f_next: torch.Tensor,
                m_prev: CorrespondenceMap, m_next: CorrespondenceMap, w_d: float):
    """Differentiable fuse with straight-through index routing.

    The maps are treated as constants; similarities, weights, gathers and the
    0.5 fusion are all built from differentiable ops so autograd yields the
    straight-through gradients.
    """
    a = _gather(f_prev, m_prev)
    b = _gather(f_next, m_next)
    s_prev = _matched_similarity(f_v, a)
    s_next = _matched_similarity(f_v, b)
    sp = torch.clamp(s_prev, 0.0, 1.0)
    sn = torch.clamp(s_next, 0.0, 1.0)
    denom = sp * w_d + (1.0 - w_d) * sn
    bad = denom < 1e-12
    safe = torch.where(bad, torch.ones_like(denom), denom)
    w = torch.where(bad, torch.full_like(denom, w_d), sp * w_d / safe)

    vp = torch.from_numpy(m_prev.valid)
    vn = torch.from_numpy(m_next.valid)
    wc = w[..., None]
    values = torch.where((vp & vn)[..., None], wc * a + (1.0 - wc) * b,
                         torch.where((vp & ~vn)[..., None], a,
                                     torch.where((~vp & vn)[..., None], b,
                                                 torch.zeros_like(a))))
    fallback = ~(vp | vn)
    fused = torch.where(fallback[..., None], f_v, 0.5 * f_v + 0.5 * values)
    return fused, s_prev, s_next, w, fallback.numpy()


def epipolar_fuse_tensor(f_v: torch.Tensor, f_prev: torch.Tensor, f_next: torch.Tensor,
                         fmat_prev: FundamentalMatrix, fmat_next: FundamentalMatrix,
                         w_d: float, eps: float = DEFAULT_BAND_EPS) -> torch.Tensor:
    """In-graph aggregation + fusion for one view (used inside the denoiser)."""
    with torch.no_grad():
        m_prev = correspondence_map(f_v, f_prev, fmat_prev, eps)
        m_next = correspondence_map(f_v, f_next, fmat_next, eps)
    fused, *_ = _fuse_graph(f_v, f_prev, f_next, m_prev, m_next, w_d)
    return fused


def epipolar_fuse(f_v, f_prev, f_next, fmat_prev: FundamentalMatrix,
                  fmat_next: FundamentalMatrix, w_d: float,
                  eps: float = DEFAULT_BAND_EPS,
                  record_gradients: bool = True):
    """Full forward pass returning (fused value, forward record).

    The record keeps the computation graph alive so :func:`ste_backward` can
    be called (repeatedly) with arbitrary upstream gradients.
    """
    f_v = torch.as_tensor(f_v, dtype=torch.float64).detach().clone()
    f_prev = torch.as_tensor(f_prev, dtype=torch.float64).detach().clone()
    f_next = torch.as_tensor(f_next, dtype=torch.float64).detach().clone()
    if record_gradients:
        for t in (f_v, f_prev, f_next):
            t.requires_grad_(True)
    m_prev = correspondence_map(f_v, f_prev, fmat_prev, eps)
    m_next = correspondence_map(f_v, f_next, fmat_next, eps)
    fused, s_prev, s_next, w, fallback = _fuse_graph(
        f_v, f_prev, f_next, m_prev, m_next, w_d
    )
    weights = HybridWeightField(
        w=w.detach().numpy(), w_d=float(w_d),
        s_prev=np.where(m_prev.valid, s_prev.detach().numpy(), 0.0),
        s_next=np.where(m_next.valid, s_next.detach().numpy(), 0.0),
    )
    record = None
    if record_gradients:
        record = EpipolarFuseRecord(
            inputs=(f_v, f_prev, f_next),
            similarities=(s_prev, s_next),
            fused=fused,
            map_prev=m_prev, map_next=m_next, weights=weights,
            extras={"fallback": fallback},
        )
    return fused.detach(), record


def ste_backward(record: EpipolarFuseRecord, upstream: torch.Tensor) -> SteGradients:
    """Straight-through gradients of the fused output.

    The argmin selection is constant index routing: gradients reach f_v
    through the 0.5 fusion, the selected neighbor tokens through the gather
    (scaled by the blend weights), and both through the weight's dependence on
    the matched-token similarities.
    """
    if record is None or record.fused.grad_fn is None:
        raise MissingForwardRecord(
            "forward pass was not recorded; rerun with record_gradients=True"
        )
    upstream = torch.as_tensor(upstream, dtype=torch.float64)
    if upstream.shape != record.fused.shape:
        raise ShapeMismatch(
            f"upstream gradient {tuple(upstream.shape)} does not match "
            f"output {tuple(record.fused.shape)}"
        )
    grads = torch.autograd.grad(
        outputs=record.fused,
        inputs=list(record.inputs) + list(record.similarities),
        grad_outputs=upstream,
        retain_graph=True,
        allow_unused=True,
    )
    grads = [g if g is not None else torch.zeros_like(ref)
             for g, ref in zip(grads, list(record.inputs) + list(record.similarities))]
    return SteGradients(f_v=grads[0], f_prev=grads[1], f_next=grads[2],
                        s_prev=grads[3], s_next=grads[4])
