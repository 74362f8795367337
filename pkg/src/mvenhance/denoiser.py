"""Toy-scale view-consistent denoiser.

A pose-aware convolutional encoder conditions a small transformer trunk
through a zero-initialized control branch; each trunk block runs per-view
self-attention, multi-view row attention with epipolar aggregation, a text
cross-attention stub, and an MLP. Everything is float64, functional, and
seeded, so runs are bit-reproducible without trained weights.

The latent space is reached through a fixed (non-learned) pseudo-codec:
8x average pooling plus a 2x2 patching step (16x total), with a constant
semi-orthogonal channel lift; decoding inverts the lift, nearest-upsamples
and applies a fixed 3x3 smoothing.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .batch import MultiViewBatch
from .epipolar_agg import DEFAULT_BAND_EPS, epipolar_fuse_tensor, geometric_weight
from .errors import InvalidSteps, ShapeMismatch
from .features import FeatureMap, scaled_dot_attention, sincos_encoding
from .row_attention import RowAttentionParams, row_attention_tensor
from .schedule import NoiseSchedule

LATENT_FACTOR = 16  # image-to-token downsampling (8x pool * 2x patch)
_POOL = 8
_PATCH = 2
_CODEC_SEED = 0x5EED  # constant; the codec is part of the format, not a parameter


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform(gen, shape, fan_in):
    bound = fan_in ** -0.5
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound


@dataclass
class AttentionParams:
    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor
    n_heads: int


@dataclass
class MlpParams:
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor


@dataclass
class BlockParams:
    self_attn: AttentionParams
    row_attn: RowAttentionParams
    cross_attn: AttentionParams  # wk/wv map text channels to model channels
    mlp: MlpParams

    def tensors(self):
        out = [self.self_attn.wq, self.self_attn.wk, self.self_attn.wv,
               self.self_attn.wo]
        out += self.row_attn.tensors()
        out += [self.cross_attn.wq, self.cross_attn.wk, self.cross_attn.wv,
                self.cross_attn.wo]
        out += [self.mlp.w1, self.mlp.b1, self.mlp.w2, self.mlp.b2]
        return out


@dataclass
class PoseEncoderParams:
    stem_w: torch.Tensor
    stem_b: torch.Tensor
    down_w: list
    down_b: list
    attn: AttentionParams
    out_w: torch.Tensor
    out_b: torch.Tensor

    def tensors(self):
        out = [self.stem_w, self.stem_b]
        out += self.down_w + self.down_b
        out += [self.attn.wq, self.attn.wk, self.attn.wv, self.attn.wo,
                self.out_w, self.out_b]
        return out


@dataclass
class DenoiserParams:
    """All weights of the toy denoiser plus its construction record."""

    channels: int
    n_heads: int
    n_blocks: int
    text_dim: int
    encoder: PoseEncoderParams
    blocks: list
    control_blocks: list
    control_entry: torch.Tensor
    control_exits: list
    head_w: torch.Tensor
    head_b: torch.Tensor
    init_record: dict = field(default_factory=dict)

    @classmethod
    def init(cls, channels: int = 64, n_heads: int = 4, n_blocks: int = 2,
             text_dim: int = 32, seed: int = 0, zero_init: bool = True
             ) -> "DenoiserParams":
        """Seeded construction.

        With ``zero_init`` (the default) every residual-branch output
        projection, the control entry/exit maps and the output head start at
        exactly zero, so the control branch contributes nothing and the
        freshly built network predicts zero noise. ``zero_init=False`` fills
        every matrix with small random values (used by gradient checks).
        """
        if channels % n_heads != 0:
            raise ShapeMismatch(f"n_heads={n_heads} must divide channels={channels}")
        gen = torch.Generator().manual_seed(seed)
        c = channels

        def attn(out_zero, kv_dim=c):
            wo = torch.zeros((c, c), dtype=torch.float64) if out_zero \
                else _uniform(gen, (c, c), c)
            return AttentionParams(
                wq=_uniform(gen, (c, c), c),
                wk=_uniform(gen, (kv_dim, c), kv_dim),
                wv=_uniform(gen, (kv_dim, c), kv_dim),
                wo=wo, n_heads=n_heads,
            )

        def mlp(out_zero):
            w2 = torch.zeros((4 * c, c), dtype=torch.float64) if out_zero \
                else _uniform(gen, (4 * c, c), 4 * c)
            return MlpParams(
                w1=_uniform(gen, (c, 4 * c), c),
                b1=torch.zeros(4 * c, dtype=torch.float64),
                w2=w2,
                b2=torch.zeros(c, dtype=torch.float64),
            )

        def block(i):
            return BlockParams(
                self_attn=attn(zero_init),
                row_attn=RowAttentionParams.init(
                    c, n_heads, seed=seed * 1000 + i, zero_output=zero_init),
                cross_attn=attn(zero_init, kv_dim=text_dim),
                mlp=mlp(zero_init),
            )

        base = max(1, c // 4)
        widths = [base, 2 * base, 4 * base, 4 * base]
        stem_w = _uniform(gen, (widths[0], 9, 3, 3), 9 * 9)
        stem_b = torch.zeros(widths[0], dtype=torch.float64)
        down_w, down_b = [], []
        w_in = widths[0]
        for w_out in widths:
            down_w.append(_uniform(gen, (w_out, w_in, 3, 3), w_in * 9))
            down_b.append(torch.zeros(w_out, dtype=torch.float64))
            w_in = w_out
        enc = PoseEncoderParams(
            stem_w=stem_w, stem_b=stem_b, down_w=down_w, down_b=down_b,
            attn=AttentionParams(
                wq=_uniform(gen, (widths[-1], widths[-1]), widths[-1]),
                wk=_uniform(gen, (widths[-1], widths[-1]), widths[-1]),
                wv=_uniform(gen, (widths[-1], widths[-1]), widths[-1]),
                wo=_uniform(gen, (widths[-1], widths[-1]), widths[-1]),
                n_heads=1,
            ),
            out_w=_uniform(gen, (widths[-1], c), widths[-1]),
            out_b=torch.zeros(c, dtype=torch.float64),
        )

        blocks = [block(i) for i in range(n_blocks)]
        n_control = math.ceil(n_blocks / 2)
        control_blocks = [block(n_blocks + i) for i in range(n_control)]

        def zero_or_random(shape, fan):
            return torch.zeros(shape, dtype=torch.float64) if zero_init \
                else _uniform(gen, shape, fan)

        return cls(
            channels=c, n_heads=n_heads, n_blocks=n_blocks, text_dim=text_dim,
            encoder=enc, blocks=blocks, control_blocks=control_blocks,
            control_entry=zero_or_random((c, c), c),
            control_exits=[zero_or_random((c, c), c) for _ in range(n_control)],
            head_w=zero_or_random((c, c), c),
            head_b=torch.zeros(c, dtype=torch.float64),
            init_record={"seed": seed, "channels": c, "n_heads": n_heads,
                         "n_blocks": n_blocks, "text_dim": text_dim,
                         "zero_init": zero_init},
        )

    def tensors(self):
        out = self.encoder.tensors()
        for b in self.blocks + self.control_blocks:
            out += b.tensors()
        out += [self.control_entry] + list(self.control_exits)
        out += [self.head_w, self.head_b]
        return out

    def requires_grad_(self, flag: bool = True):
        for t in self.tensors():
            t.requires_grad_(flag)
        return self


@dataclass
class TextCondition:
    """Deterministic hash-seeded embedding of a caption.

    With the drop flag set the embedding equals the empty caption's, which is
    also what classifier-free guidance uses for its unconditional pass.
    """

    caption: str = ""
    drop: bool = False
    n_tokens: int = 4
    dim: int = 32
    embedding: np.ndarray = field(init=False)

    def __post_init__(self):
        source = "" if self.drop else self.caption
        digest = hashlib.sha256(source.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        self.embedding = rng.standard_normal((self.n_tokens, self.dim))

    def tokens(self) -> torch.Tensor:
        return torch.from_numpy(self.embedding)


@dataclass
class GeometryContext:
    """Pose-derived quantities reused across denoiser blocks and steps."""

    fmat_prev: list
    fmat_next: list
    w_d: list
    eps: float

    @classmethod
    def from_poses(cls, poses, h: int, w: int,
                   eps: float = DEFAULT_BAND_EPS) -> "GeometryContext | None":
        n = len(poses)
        if n < 3:
            return None  # ring neighbors undefined; aggregation is skipped
        fp, fn, wd = [], [], []
        for v in range(n):
            fp.append(geometry.token_fundamental_matrix(
                poses[v], poses[(v - 1) % n], h, w, v, (v - 1) % n))
            fn.append(geometry.token_fundamental_matrix(
                poses[v], poses[(v + 1) % n], h, w, v, (v + 1) % n))
            wd.append(geometric_weight(poses, v))
        return cls(fmat_prev=fp, fmat_next=fn, w_d=wd, eps=eps)


# ---------------------------------------------------------------------------
# pseudo codec (fixed, non-learned)
# ---------------------------------------------------------------------------

_codec_cache: dict = {}


def _codec_matrix(channels: int) -> torch.Tensor:
    """Constant semi-orthogonal lift between 12 patch channels and the latent."""
    if channels not in _codec_cache:
        gen = torch.Generator().manual_seed(_CODEC_SEED)
        if channels >= 12:
            a = torch.randn((channels, 12), generator=gen, dtype=torch.float64)
            q, r = torch.linalg.qr(a)
            q = q * torch.sign(torch.diagonal(r))  # deterministic sign
            _codec_cache[channels] = q.T.contiguous()  # (12, C), P P^T = I
        else:
            a = torch.randn((12, channels), generator=gen, dtype=torch.float64)
            q, r = torch.linalg.qr(a)
            q = q * torch.sign(torch.diagonal(r))
            _codec_cache[channels] = q.contiguous()  # (12, C), P^T P = I
    return _codec_cache[channels]


def pseudo_encode(images: np.ndarray, channels: int = 64) -> torch.Tensor:
    """Fixed 16x spatial reduction of (V, H, W, 3) images to latent tokens."""
    imgs = torch.as_tensor(np.asarray(images), dtype=torch.float64)
    v, h, w, _ = imgs.shape
    if h % LATENT_FACTOR or w % LATENT_FACTOR:
        raise ShapeMismatch(f"image size {h}x{w} not divisible by {LATENT_FACTOR}")
    x = imgs.permute(0, 3, 1, 2)
    pooled = F.avg_pool2d(x, _POOL)  # (V, 3, H/8, W/8)
    hh, ww = pooled.shape[2] // _PATCH, pooled.shape[3] // _PATCH
    patches = pooled.reshape(v, 3, hh, _PATCH, ww, _PATCH)
    patches = patches.permute(0, 2, 4, 1, 3, 5).reshape(v, hh, ww, 12)
    return patches @ _codec_matrix(channels)


def pseudo_decode(z: torch.Tensor, height: int, width: int) -> np.ndarray:
    """Invert the channel lift, nearest-upsample, smooth, and clamp to [0, 1]."""
    v, hh, ww, c = z.shape
    patches = z @ _codec_matrix(c).T  # (V, h, w, 12)
    pooled = patches.reshape(v, hh, ww, 3, _PATCH, _PATCH)
    pooled = pooled.permute(0, 3, 1, 4, 2, 5).reshape(v, 3, hh * _PATCH, ww * _PATCH)
    up = pooled.repeat_interleave(_POOL, dim=2).repeat_interleave(_POOL, dim=3)
    kernel = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]],
                          dtype=torch.float64) / 16.0
    kernel = kernel.expand(3, 1, 3, 3)
    padded = F.pad(up, (1, 1, 1, 1), mode="replicate")
    smooth = F.conv2d(padded, kernel, groups=3)
    out = smooth.permute(0, 2, 3, 1)[:, :height, :width, :]
    return np.clip(out.numpy(), 0.0, 1.0)


def pseudo_roundtrip(images: np.ndarray, channels: int = 64) -> np.ndarray:
    """The delta = 0 path of the sampler: encode then decode."""
    z = pseudo_encode(images, channels)
    return pseudo_decode(z, images.shape[1], images.shape[2])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _timestep_embedding(t: int, channels: int) -> torch.Tensor:
    half = channels // 2
    freqs = torch.exp(-math.log(10000.0)
                      * torch.arange(half, dtype=torch.float64) / half)
    ang = t * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)])
    if emb.numel() < channels:
        emb = torch.cat([emb, torch.zeros(channels - emb.numel(), dtype=torch.float64)])
    return emb


def _multihead(q, k, v, n_heads):
    def split(x):
        *lead, t, c = x.shape
        return x.reshape(*lead, t, n_heads, c // n_heads).transpose(-2, -3)

    out = scaled_dot_attention(split(q), split(k), split(v))
    out = out.transpose(-2, -3)
    *lead, t, nh, hd = out.shape
    return out.reshape(*lead, t, nh * hd)


def _self_attention(x: torch.Tensor, p: AttentionParams) -> torch.Tensor:
    v, h, w, c = x.shape
    tokens = x.reshape(v, h * w, c)
    n = F.layer_norm(tokens, (c,))
    out = _multihead(n @ p.wq, n @ p.wk, n @ p.wv, p.n_heads) @ p.wo
    return x + out.reshape(v, h, w, c)


def _cross_attention(x: torch.Tensor, p: AttentionParams,
                     text_tokens: torch.Tensor) -> torch.Tensor:
    v, h, w, c = x.shape
    tokens = x.reshape(v, h * w, c)
    n = F.layer_norm(tokens, (c,))
    k = (text_tokens @ p.wk).expand(v, -1, -1)
    val = (text_tokens @ p.wv).expand(v, -1, -1)
    out = _multihead(n @ p.wq, k, val, p.n_heads) @ p.wo
    return x + out.reshape(v, h, w, c)


def _mlp(x: torch.Tensor, p: MlpParams) -> torch.Tensor:
    n = F.layer_norm(x, (x.shape[-1],))
    return x + (F.gelu(n @ p.w1 + p.b1) @ p.w2 + p.b2)


def _epipolar_step(x: torch.Tensor, geo: GeometryContext) -> torch.Tensor:
    n = x.shape[0]
    fused = []
    for v in range(n):
        fused.append(epipolar_fuse_tensor(
            x[v], x[(v - 1) % n], x[(v + 1) % n],
            geo.fmat_prev[v], geo.fmat_next[v], geo.w_d[v], geo.eps,
        ))
    return torch.stack(fused, dim=0)


def _block_forward(x, bp: BlockParams, pos, geo, text_tokens):
    x = _self_attention(x, bp.self_attn)
    x = row_attention_tensor(x, bp.row_attn, pos)
    if geo is not None:
        x = _epipolar_step(x, geo)
    x = _cross_attention(x, bp.cross_attn, text_tokens)
    x = _mlp(x, bp.mlp)
    return x


def pose_encoder(batch: MultiViewBatch, params: PoseEncoderParams,
                 cross_view: bool = True) -> FeatureMap:
    """Encode RGB + per-pixel ray coordinates into 16x-downsampled conditions.

    A cross-view self-attention step at the bottleneck lets views exchange
    pose information; disable it with ``cross_view=False`` to get a strictly
    per-view encoding (used by ablation tests).
    """
    v, h, w = batch.n_views, batch.height, batch.width
    if h % LATENT_FACTOR or w % LATENT_FACTOR:
        raise ShapeMismatch(f"image size {h}x{w} not divisible by {LATENT_FACTOR}")
    rays = np.stack([geometry.compute_plucker(p, h, w).grid for p in batch.poses])
    x = np.concatenate([batch.images, rays], axis=-1)  # (V, H, W, 9)
    x = torch.as_tensor(x, dtype=torch.float64).permute(0, 3, 1, 2)
    x = F.relu(F.conv2d(x, params.stem_w, params.stem_b, padding=1))
    for w_k, b_k in zip(params.down_w, params.down_b):
        x = F.relu(F.conv2d(x, w_k, b_k, stride=2, padding=1))
    _, cb, hb, wb = x.shape
    tokens = x.permute(0, 2, 3, 1).reshape(v, hb * wb, cb)
    if cross_view:
        flat = tokens.reshape(1, v * hb * wb, cb)
        n = F.layer_norm(flat, (cb,))
        p = params.attn
        out = _multihead(n @ p.wq, n @ p.wk, n @ p.wv, p.n_heads) @ p.wo
        tokens = (flat + out).reshape(v, hb * wb, cb)
    cond = tokens @ params.out_w + params.out_b
    return FeatureMap(cond.reshape(v, hb, wb, -1))


def forward_denoise(z_t: FeatureMap, t: int, cond: FeatureMap | None,
                    text: TextCondition | None, params: DenoiserParams,
                    geo: GeometryContext | None = None,
                    schedule: NoiseSchedule | None = None) -> FeatureMap:
    """Predict the noise content of latent tokens at schedule index ``t``."""
    schedule = schedule or NoiseSchedule()
    schedule.validate_level(t)
    x = z_t.data
    v, h, w, c = x.shape
    if c != params.channels:
        raise ShapeMismatch(f"latent has {c} channels, params expect {params.channels}")
    if cond is not None and tuple(cond.data.shape) != (v, h, w, c):
        raise ShapeMismatch(
            f"condition shape {tuple(cond.data.shape)} does not match latent "
            f"{(v, h, w, c)}"
        )
    text = text or TextCondition("", dim=params.text_dim)
    if text.dim != params.text_dim:
        raise ShapeMismatch(
            f"text embedding dim {text.dim} != params.text_dim {params.text_dim}"
        )
    pos = sincos_encoding(h, w, v, c)
    text_tokens = text.tokens()
    x = x + _timestep_embedding(t, c)
    ctrl = x + cond.data @ params.control_entry if cond is not None else None
    for i, bp in enumerate(params.blocks):
        x = _block_forward(x, bp, pos, geo, text_tokens)
        if ctrl is not None and i < len(params.control_blocks):
            ctrl = _block_forward(ctrl, params.control_blocks[i], pos, geo,
                                  text_tokens)
            x = x + ctrl @ params.control_exits[i]
    out = F.layer_norm(x, (c,)) @ params.head_w + params.head_b
    return FeatureMap(out)


def mv_diffusion_loss(batch: MultiViewBatch, params: DenoiserParams, t: int,
                      seed: int, noise: torch.Tensor | None = None,
                      denoise_fn=None, schedule: NoiseSchedule | None = None,
                      drop_text: bool = False,
                      use_geometry: bool = True) -> torch.Tensor:
    """Mean squared error between drawn and predicted noise at index ``t``.

    ``noise`` overrides the seeded draw; ``denoise_fn`` substitutes the
    network (used by oracle tests). Returns a scalar tensor so parameter
    gradients can be taken when params require grad.
    """
    schedule = schedule or NoiseSchedule()
    t = schedule.validate_level(t)
    z = pseudo_encode(batch.images, params.channels)
    if noise is None:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(z.shape, generator=gen, dtype=torch.float64)
    alpha, sigma = schedule.coefficients(t)
    z_t = FeatureMap(alpha * z + sigma * noise)
    cond = pose_encoder(batch, params.encoder)
    text = TextCondition(batch.text or "", drop=drop_text, dim=params.text_dim)
    geo = None
    if use_geometry:
        geo = GeometryContext.from_poses(batch.poses, z.shape[1], z.shape[2])
    fn = denoise_fn or (lambda *a, **k: forward_denoise(*a, **k))
    predicted = fn(z_t, t, cond, text, params, geo=geo, schedule=schedule)
    return ((noise - predicted.data) ** 2).mean()


def ddim_enhance(lq: MultiViewBatch, delta: int, params: DenoiserParams,
                 steps: int = 20, cfg_scale: float = 4.5, seed: int = 0,
                 prompt: str | None = None,
                 schedule: NoiseSchedule | None = None,
                 use_geometry: bool = True) -> MultiViewBatch:
    """Deterministic enhancement loop with classifier-free guidance.

    The noise level maps directly onto the starting timestep: the encoded
    input is renoised to level ``delta`` and denoised over ``steps`` uniformly
    spaced indices. Level 0 reduces to the pseudo-codec round trip. The output
    is structural with untrained toy parameters (shapes, determinism, guidance
    semantics); it is not a learned enhancement.
    """
    if not isinstance(steps, int) or steps < 1:
        raise InvalidSteps(f"steps must be a positive integer, got {steps!r}")
    schedule = schedule or NoiseSchedule()
    delta = schedule.validate_level(delta)
    images = lq.images
    z = pseudo_encode(images, params.channels)
    v, h, w, _ = z.shape

    if delta > 0:
        caption = prompt if prompt is not None else (lq.text or "")
        text_cond = TextCondition(caption, dim=params.text_dim)
        text_uncond = TextCondition(caption, drop=True, dim=params.text_dim)
        cond = pose_encoder(lq, params.encoder)
        geo = GeometryContext.from_poses(lq.poses, h, w) if use_geometry else None
        gen = torch.Generator().manual_seed(seed)
        eps0 = torch.randn(z.shape, generator=gen, dtype=torch.float64)
        alpha_d, sigma_d = schedule.coefficients(delta)
        z = alpha_d * z + sigma_d * eps0

        raw = np.round(np.linspace(delta, 0, steps + 1)).astype(int)
        timesteps = [int(raw[0])]
        for t in raw[1:]:
            if int(t) < timesteps[-1]:
                timesteps.append(int(t))
        with torch.no_grad():
            for t_now, t_next in zip(timesteps[:-1], timesteps[1:]):
                eps_u = forward_denoise(FeatureMap(z), t_now, cond, text_uncond,
                                        params, geo, schedule).data
                if cfg_scale == 0.0:
                    eps_hat = eps_u
                else:
                    eps_c = forward_denoise(FeatureMap(z), t_now, cond, text_cond,
                                            params, geo, schedule).data
                    eps_hat = eps_u + cfg_scale * (eps_c - eps_u)
                a_now, s_now = schedule.coefficients(t_now)
                a_next, s_next = schedule.coefficients(t_next)
                x0 = (z - s_now * eps_hat) / a_now
                z = a_next * x0 + s_next * eps_hat

    out = pseudo_decode(z, lq.height, lq.width)
    return lq.with_images(out, noise_level=0)


def fit_denoiser(params: DenoiserParams, batches, steps: int = 200,
                 lr: float = 1e-3, seed: int = 0, text_drop_rate: float = 0.2,
                 schedule: NoiseSchedule | None = None) -> list:
    """Smoke-test trainer: a few hundred steps over toy batches.

    Demonstrates that the loss decreases; it is not meant to converge. Text
    conditions are dropped at ``text_drop_rate`` to keep the unconditional
    guidance path trained.
    """
    schedule = schedule or NoiseSchedule()
    rng = np.random.default_rng(seed)
    leaves = params.requires_grad_(True).tensors()
    opt = torch.optim.Adam(leaves, lr=lr)
    losses = []
    try:
        for step in range(steps):
            batch = batches[int(rng.integers(len(batches)))]
            t = int(rng.integers(1, schedule.steps))
            drop = bool(rng.uniform() < text_drop_rate)
            loss = mv_diffusion_loss(batch, params, t, seed=seed * 100003 + step,
                                     schedule=schedule, drop_text=drop)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    finally:
        params.requires_grad_(False)
    return losses
