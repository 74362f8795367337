"""Second-order multi-view degradation pipeline with a replayable audit trail.

Stage order: grid distortion, first blur, resize (down + up), Gaussian noise,
JPEG, optional second blur, final sinc filter, color shift, translucent mask;
camera jitter perturbs the conditioning pose without re-rendering. All pixel
degradations are confined to the dilated object mask; the background is
composited back from the clean input. Every random draw comes from a
counter-based generator keyed by (seed, view, stage), so results are
bit-identical for any thread count and any schedule, and every run emits a
record that replays bit-exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.ndimage
import scipy.special

from . import cameras
from .batch import MultiViewBatch
from .errors import InvalidConfig, InvalidKernel
from .jpeg import jpeg_roundtrip
from .schedule import NoiseSchedule

BLUR_KERNEL_SIZES = (7, 9, 11, 13, 15, 17, 19, 21)
GRID_NODES = 9  # 8x8 control cells

# stage ids used in rng spawn keys; changing these breaks record replay
STAGE_BATCH = 0
STAGE_GRID = 1
STAGE_FIRST_BLUR = 2
STAGE_RESIZE = 3
STAGE_NOISE = 4
STAGE_JPEG = 5
STAGE_SECOND_BLUR = 6
STAGE_SINC = 7
STAGE_COLOR = 8
STAGE_TRANSLUCENT = 9
STAGE_JITTER = 10


@dataclass(frozen=True)
class DegradationConfig:
    """Pipeline probabilities and parameter ranges.

    The blur/noise/resize/JPEG/sinc/jitter/color-shift/grid-distortion/no-aug
    values follow the published augmentation table; noise sigma, sinc cutoff,
    translucent-mask settings, shared-draw probability and mask dilation are
    repo defaults.
    """

    first_blur_prob: float = 0.8
    second_blur_prob: float = 0.3
    blur_kernel_sizes: tuple = BLUR_KERNEL_SIZES
    blur_sigma: tuple = (0.2, 3.0)
    noise_prob: float = 0.5
    noise_sigma: tuple = (1.0 / 255.0, 10.0 / 255.0)
    resize_range: tuple = (0.3, 1.5)
    jpeg_quality: tuple = (80, 100)
    sinc_prob: float = 0.8
    sinc_cutoff: tuple = (math.pi / 3.0, math.pi)
    camera_jitter_prob: float = 0.2
    camera_jitter_strength: tuple = (0.05, 0.1)
    color_shift_prob: float = 0.3
    grid_distortion_prob: float = 0.3
    grid_distortion_strength: tuple = (0.2, 0.5)
    translucent_mask_prob: float = 0.3
    translucent_alpha: tuple = (0.2, 0.5)
    no_aug_prob: float = 0.1
    shared_across_views_prob: float = 0.5
    mask_dilation_px: int = 3

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_prob"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise InvalidConfig(f"{f.name}={p} outside [0, 1]")
        for name in ("blur_sigma", "noise_sigma", "resize_range", "jpeg_quality",
                     "sinc_cutoff", "camera_jitter_strength",
                     "grid_distortion_strength", "translucent_alpha"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} range ({lo}, {hi}) not ordered")
        for k in self.blur_kernel_sizes:
            if k % 2 == 0 or not 7 <= k <= 21:
                raise InvalidConfig(f"blur kernel size {k} must be odd and in [7, 21]")
        if self.mask_dilation_px < 0:
            raise InvalidConfig("mask_dilation_px must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_kernel_sizes"] = list(self.blur_kernel_sizes)
        for name in ("blur_sigma", "noise_sigma", "resize_range", "jpeg_quality",
                     "sinc_cutoff", "camera_jitter_strength",
                     "grid_distortion_strength", "translucent_alpha"):
            d[name] = list(getattr(self, name))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class DegradationRecord:
    """Ordered audit trail; replaying it reproduces the LQ batch bit-exactly."""

    seed: int
    n_views: int
    entries: list = field(default_factory=list)

    def events_for_view(self, view: int):
        return [e for e in self.entries if e["view"] == view]

    def applied_ops(self):
        """Per-view-slot applied op names (excludes batch-level entries)."""
        return [e["op"] for e in self.entries if e["view"] >= 0]


def _rng(seed: int, view: int, stage: int) -> np.random.Generator:
    # view slot 0 is reserved for batch-level draws
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(view + 1, stage))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# individual degradations
# ---------------------------------------------------------------------------

def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian kernel evaluated on integer offsets."""
    if kernel_size % 2 == 0 or not 7 <= kernel_size <= 21:
        raise InvalidKernel(f"kernel size must be odd and in [7, 21], got {kernel_size}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g1, g1)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian convolution with clamp-to-edge padding."""
    if kernel_size % 2 == 0 or not 7 <= kernel_size <= 21:
        raise InvalidKernel(f"kernel size must be odd and in [7, 21], got {kernel_size}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g1 /= g1.sum()
    out = scipy.ndimage.convolve1d(np.asarray(img, dtype=np.float64), g1,
                                   axis=0, mode="nearest")
    return scipy.ndimage.convolve1d(out, g1, axis=1, mode="nearest")


def sinc_kernel(kernel_size: int, cutoff: float) -> np.ndarray:
    """Normalized circular low-pass (jinc) kernel."""
    if kernel_size % 2 == 0:
        raise InvalidKernel(f"sinc kernel size must be odd, got {kernel_size}")
    half = kernel_size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    r = np.hypot(x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = cutoff * scipy.special.j1(cutoff * r) / (2.0 * math.pi * r)
    k[half, half] = cutoff ** 2 / (4.0 * math.pi)
    return k / k.sum()


def sinc_filter(img: np.ndarray, kernel_size: int, cutoff: float) -> np.ndarray:
    k = sinc_kernel(kernel_size, cutoff)
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[-1]):
        out[..., c] = scipy.ndimage.convolve(img[..., c], k, mode="nearest")
    return out


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample H x W x C at float coords (x=col, y=row), clamping to the edge."""
    h, w = img.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment."""
    h, w = img.shape[:2]
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xx, yy = np.meshgrid(xs, ys)
    return bilinear_sample(img, xx, yy)


def resize_roundtrip(img: np.ndarray, scale: float) -> np.ndarray:
    """Resize by ``scale`` and back to the original resolution (both bilinear)."""
    h, w = img.shape[:2]
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    return bilinear_resize(bilinear_resize(img, nh, nw), h, w)


def _grid_warp(img: np.ndarray, node_dx: np.ndarray, node_dy: np.ndarray) -> np.ndarray:
    """Warp by bilinearly interpolated control-node displacements (backward map)."""
    h, w = img.shape[:2]
    cells = GRID_NODES - 1
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    tu = u / ((w - 1) / cells)
    tv = v / ((h - 1) / cells)
    i0 = np.clip(np.floor(tu).astype(np.int64), 0, cells - 1)
    j0 = np.clip(np.floor(tv).astype(np.int64), 0, cells - 1)
    fu = tu - i0
    fv = tv - j0
    fu2, fv2 = np.meshgrid(fu, fv)
    i0g, j0g = np.meshgrid(i0, j0)

    def interp(nodes):
        n00 = nodes[j0g, i0g]
        n01 = nodes[j0g, i0g + 1]
        n10 = nodes[j0g + 1, i0g]
        n11 = nodes[j0g + 1, i0g + 1]
        return (n00 * (1 - fu2) * (1 - fv2) + n01 * fu2 * (1 - fv2)
                + n10 * (1 - fu2) * fv2 + n11 * fu2 * fv2)

    dx = interp(node_dx)
    dy = interp(node_dy)
    xx, yy = np.meshgrid(u, v)
    return bilinear_sample(img, xx - dx, yy - dy)


def sample_grid_offsets(h: int, w: int, strength: float,
                        rng: np.random.Generator):
    """Control-node displacements: interior nodes uniform in
    +-0.5 * strength * cell size, boundary nodes (and therefore corners) fixed."""
    cell_x = (w - 1) / (GRID_NODES - 1)
    cell_y = (h - 1) / (GRID_NODES - 1)
    node_dx = np.zeros((GRID_NODES, GRID_NODES))
    node_dy = np.zeros((GRID_NODES, GRID_NODES))
    interior = (GRID_NODES - 2, GRID_NODES - 2)
    node_dx[1:-1, 1:-1] = rng.uniform(-0.5, 0.5, interior) * strength * cell_x
    node_dy[1:-1, 1:-1] = rng.uniform(-0.5, 0.5, interior) * strength * cell_y
    return node_dx, node_dy


def grid_distortion(img: np.ndarray, strength: float, seed) -> np.ndarray:
    """Smooth warp from a randomly perturbed 8x8 control grid; corners fixed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    node_dx, node_dy = sample_grid_offsets(img.shape[0], img.shape[1], strength, rng)
    return _grid_warp(np.asarray(img, dtype=np.float64), node_dx, node_dy)


def camera_jitter(pose: cameras.CameraPose, strength: float, seed,
                  look_at=(0.0, 0.0, 0.0)) -> cameras.CameraPose:
    """Perturb the orbit parameters of a pose; the image is not re-rendered.

    Azimuth and elevation move by uniform(-s, s) radians, the radius by a
    uniform(-s, s) fraction of itself.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d_az, d_el, d_rad = rng.uniform(-strength, strength, 3)
    return _apply_jitter(pose, d_az, d_el, d_rad, look_at)


def _apply_jitter(pose, d_az_rad, d_el_rad, d_rad_frac, look_at):
    az, el, radius = cameras.orbit_parameters(pose, look_at)
    return cameras.orbit_pose(
        azimuth_deg=az + math.degrees(d_az_rad),
        elevation_deg=el + math.degrees(d_el_rad),
        radius=radius * (1.0 + d_rad_frac),
        look_at=look_at,
        width=pose.width,
        height=pose.height,
        focal=pose.fx,
    )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe_span = np.where(span > 0, span, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    rc = (maxc - r) / safe_span
    gc = (maxc - g) / safe_span
    bc = (maxc - b) / safe_span
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    choices_r = np.stack([v, q, p, p, t, v], axis=-1)
    choices_g = np.stack([t, v, v, q, p, p], axis=-1)
    choices_b = np.stack([p, p, t, v, v, q], axis=-1)
    idx = i[..., None]
    r = np.take_along_axis(choices_r, idx, axis=-1)[..., 0]
    g = np.take_along_axis(choices_g, idx, axis=-1)[..., 0]
    b = np.take_along_axis(choices_b, idx, axis=-1)[..., 0]
    return np.stack([r, g, b], axis=-1)


def apply_hue_saturation(img: np.ndarray, region: np.ndarray,
                         hue_offset: float, sat_offset: float) -> np.ndarray:
    """Shift hue (mod 1) and saturation (clipped) inside a boolean region."""
    out = np.asarray(img, dtype=np.float64).copy()
    if not region.any():
        return out
    hsv = rgb_to_hsv(out[region])
    hsv[:, 0] = (hsv[:, 0] + hue_offset) % 1.0
    hsv[:, 1] = np.clip(hsv[:, 1] + sat_offset, 0.0, 1.0)
    out[region] = hsv_to_rgb(hsv)
    return out


def _random_rect(rng: np.random.Generator, h: int, w: int,
                 min_frac=0.15, max_frac=0.6):
    rh = max(1, int(round(rng.uniform(min_frac, max_frac) * h)))
    rw = max(1, int(round(rng.uniform(min_frac, max_frac) * w)))
    top = int(rng.integers(0, max(1, h - rh + 1)))
    left = int(rng.integers(0, max(1, w - rw + 1)))
    return top, left, rh, rw


def color_shift(img: np.ndarray, mask: np.ndarray, seed) -> np.ndarray:
    """Hue/saturation offsets on 1-3 random rectangles intersected with the mask."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.asarray(img, dtype=np.float64).copy()
    h, w = out.shape[:2]
    n_rects = int(rng.integers(1, 4))
    for _ in range(n_rects):
        top, left, rh, rw = _random_rect(rng, h, w)
        hue_offset = rng.uniform(-0.1, 0.1)
        sat_offset = rng.uniform(-0.3, 0.3)
        region = np.zeros((h, w), dtype=bool)
        region[top:top + rh, left:left + rw] = True
        region &= mask
        out = apply_hue_saturation(out, region, hue_offset, sat_offset)
    return out


def translucent_mask(img: np.ndarray, mask: np.ndarray, alpha: float, seed) -> np.ndarray:
    """Blend a gray overlay into a random sub-region of the object mask."""
    if not 0.2 <= alpha <= 0.5:
        raise InvalidConfig(f"translucent alpha {alpha} outside [0.2, 0.5]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.asarray(img, dtype=np.float64).copy()
    h, w = out.shape[:2]
    top, left, rh, rw = _random_rect(rng, h, w, min_frac=0.25, max_frac=0.8)
    region = np.zeros((h, w), dtype=bool)
    region[top:top + rh, left:left + rw] = True
    region &= mask
    out[region] = (1.0 - alpha) * out[region] + alpha * 0.5
    return out


def noise_level_augment(batch: MultiViewBatch, delta: int, seed,
                        schedule: NoiseSchedule | None = None) -> MultiViewBatch:
    """Diffusion-style controllable noise inside the object masks.

    x <- clip(alpha_d * x + sigma_d * eps) on masked pixels; level 0 is the
    identity.
    """
    schedule = schedule or NoiseSchedule()
    delta = schedule.validate_level(delta)
    if delta == 0:
        return batch.with_images(batch.images.copy(), noise_level=0)
    alpha, sigma = schedule.coefficients(delta)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(batch.images.shape)
    noisy = alpha * batch.images + sigma * eps
    m = batch.masks[..., None]
    out = np.where(m, np.clip(noisy, 0.0, 1.0), batch.images)
    return batch.with_images(out, noise_level=delta)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _sample_view_plan(cfg: DegradationConfig, seed: int, draw_view: int,
                      apply_view: int) -> list:
    """Ordered (op, params) list for one view.

    ``draw_view`` selects the rng stream for the scalar draws (view 0 when the
    batch shares one draw), while pixel-level noise keys always use
    ``apply_view`` so per-view noise fields stay independent.
    """
    plan = []

    rng = _rng(seed, draw_view, STAGE_GRID)
    if rng.uniform() < cfg.grid_distortion_prob:
        strength = rng.uniform(*cfg.grid_distortion_strength)
        plan.append(("grid_distortion", {
            "strength": strength, "rng_key": [seed, apply_view, STAGE_GRID],
        }))

    rng = _rng(seed, draw_view, STAGE_FIRST_BLUR)
    if rng.uniform() < cfg.first_blur_prob:
        plan.append(("first_blur", {
            "kernel_size": int(rng.choice(cfg.blur_kernel_sizes)),
            "sigma": rng.uniform(*cfg.blur_sigma),
        }))

    rng = _rng(seed, draw_view, STAGE_RESIZE)
    plan.append(("resize", {"scale": rng.uniform(*cfg.resize_range)}))

    rng = _rng(seed, draw_view, STAGE_NOISE)
    if rng.uniform() < cfg.noise_prob:
        plan.append(("noise", {
            "sigma": rng.uniform(*cfg.noise_sigma),
            "rng_key": [seed, apply_view, STAGE_NOISE],
        }))

    rng = _rng(seed, draw_view, STAGE_JPEG)
    plan.append(("jpeg", {
        "quality": int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1)),
    }))

    rng = _rng(seed, draw_view, STAGE_SECOND_BLUR)
    if rng.uniform() < cfg.second_blur_prob:
        plan.append(("second_blur", {
            "kernel_size": int(rng.choice(cfg.blur_kernel_sizes)),
            "sigma": rng.uniform(*cfg.blur_sigma),
        }))

    rng = _rng(seed, draw_view, STAGE_SINC)
    if rng.uniform() < cfg.sinc_prob:
        plan.append(("sinc", {
            "kernel_size": int(rng.choice(cfg.blur_kernel_sizes)),
            "cutoff": rng.uniform(*cfg.sinc_cutoff),
        }))

    rng = _rng(seed, draw_view, STAGE_COLOR)
    if rng.uniform() < cfg.color_shift_prob:
        plan.append(("color_shift", {"rng_key": [seed, apply_view, STAGE_COLOR]}))

    rng = _rng(seed, draw_view, STAGE_TRANSLUCENT)
    if rng.uniform() < cfg.translucent_mask_prob:
        plan.append(("translucent_mask", {
            "alpha": rng.uniform(*cfg.translucent_alpha),
            "rng_key": [seed, apply_view, STAGE_TRANSLUCENT],
        }))

    rng = _rng(seed, draw_view, STAGE_JITTER)
    if rng.uniform() < cfg.camera_jitter_prob:
        strength = rng.uniform(*cfg.camera_jitter_strength)
        d_az, d_el, d_rad = rng.uniform(-strength, strength, 3)
        plan.append(("camera_jitter", {
            "strength": strength, "d_az": d_az, "d_el": d_el, "d_rad": d_rad,
        }))

    return plan


def _apply_op(op: str, params: dict, img: np.ndarray, mask: np.ndarray, pose):
    if op == "grid_distortion":
        rng = _rng(*params["rng_key"])
        dx, dy = sample_grid_offsets(img.shape[0], img.shape[1],
                                     params["strength"], rng)
        return _grid_warp(img, dx, dy), pose
    if op in ("first_blur", "second_blur"):
        return gaussian_blur(img, params["kernel_size"], params["sigma"]), pose
    if op == "resize":
        return resize_roundtrip(img, params["scale"]), pose
    if op == "noise":
        rng = _rng(*params["rng_key"])
        return img + rng.standard_normal(img.shape) * params["sigma"], pose
    if op == "jpeg":
        return jpeg_roundtrip(np.clip(img, 0.0, 1.0), params["quality"]), pose
    if op == "sinc":
        return sinc_filter(img, params["kernel_size"], params["cutoff"]), pose
    if op == "color_shift":
        return color_shift(np.clip(img, 0.0, 1.0), mask, _rng(*params["rng_key"])), pose
    if op == "translucent_mask":
        return translucent_mask(img, mask, params["alpha"],
                                _rng(*params["rng_key"])), pose
    if op == "camera_jitter":
        return img, _apply_jitter(pose, params["d_az"], params["d_el"],
                                  params["d_rad"], (0.0, 0.0, 0.0))
    raise InvalidConfig(f"unknown degradation op {op!r}")


def _dilate(mask: np.ndarray, px: int) -> np.ndarray:
    if px <= 0:
        return mask
    structure = np.ones((2 * px + 1, 2 * px + 1), dtype=bool)
    return scipy.ndimage.binary_dilation(mask, structure=structure)


def _degrade_view(img, mask, pose, plan, dilation_px):
    out = img.copy()
    out_pose = pose
    for op, params in plan:
        out, out_pose = _apply_op(op, params, out, mask, out_pose)
    keep = _dilate(mask, dilation_px)[..., None]
    out = np.where(keep, np.clip(out, 0.0, 1.0), img)
    return out, out_pose


def degrade_batch(hq: MultiViewBatch, cfg: DegradationConfig, seed: int,
                  threads: int = 1):
    """Produce an LQ copy of ``hq`` plus the record that reproduces it.

    With probability ``no_aug_prob`` the output equals the input; with
    probability ``shared_across_views_prob`` all views share one scalar
    parameter draw (pixel-noise fields stay per-view).
    """
    if not isinstance(cfg, DegradationConfig):
        raise InvalidConfig(f"expected DegradationConfig, got {type(cfg)}")
    gates = _rng(seed, -1, STAGE_BATCH)
    no_aug = bool(gates.uniform() < cfg.no_aug_prob)
    shared = bool(gates.uniform() < cfg.shared_across_views_prob)
    record = DegradationRecord(seed=seed, n_views=hq.n_views)
    record.entries.append({
        "view": -1, "op": "batch_gates",
        "params": {"no_aug": no_aug, "shared": shared,
                   "mask_dilation_px": cfg.mask_dilation_px},
    })
    if no_aug:
        return hq.with_images(hq.images.copy()), record

    plans = []
    for v in range(hq.n_views):
        draw_view = 0 if shared else v
        plan = _sample_view_plan(cfg, seed, draw_view, v)
        plans.append(plan)
        for op, params in plan:
            record.entries.append({"view": v, "op": op, "params": dict(params)})

    lq_images, lq_poses = _run_plans(hq, plans, cfg.mask_dilation_px, threads)
    lq = MultiViewBatch(images=lq_images, poses=lq_poses, masks=hq.masks.copy(),
                        text=hq.text, noise_level=hq.noise_level)
    return lq, record


def _run_plans(hq: MultiViewBatch, plans, dilation_px: int, threads: int):
    lq_images = np.empty_like(hq.images)
    lq_poses = list(hq.poses)

    def work(v):
        return _degrade_view(hq.images[v], hq.masks[v], hq.poses[v], plans[v],
                             dilation_px)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(hq.n_views)))
    else:
        results = [work(v) for v in range(hq.n_views)]
    for v, (img, pose) in enumerate(results):
        lq_images[v] = img
        lq_poses[v] = pose
    return lq_images, lq_poses


def apply_record(hq: MultiViewBatch, record: DegradationRecord,
                 threads: int = 1) -> MultiViewBatch:
    """Re-run a recorded degradation; bit-identical to the original output."""
    head = record.entries[0]
    if head["op"] != "batch_gates":
        raise InvalidConfig("record does not start with the batch_gates entry")
    if head["params"]["no_aug"]:
        return hq.with_images(hq.images.copy())
    dilation_px = head["params"]["mask_dilation_px"]
    plans = [[(e["op"], e["params"]) for e in record.events_for_view(v)]
             for v in range(hq.n_views)]
    lq_images, lq_poses = _run_plans(hq, plans, dilation_px, threads)
    return MultiViewBatch(images=lq_images, poses=lq_poses, masks=hq.masks.copy(),
                          text=hq.text, noise_level=hq.noise_level)


def stage_statistics(records) -> dict:
    """Empirical stage frequencies over many records.

    Gated-stage frequencies are reported conditional on augmentation actually
    running (the no-aug switch suppresses every stage), counted per view slot.
    """
    trials = len(records)
    no_aug = sum(1 for r in records if r.entries[0]["params"]["no_aug"])
    slots = 0
    counts: dict[str, int] = {}
    for r in records:
        if r.entries[0]["params"]["no_aug"]:
            continue
        slots += r.n_views
        for op in r.applied_ops():
            counts[op] = counts.get(op, 0) + 1
    freq = {op: counts.get(op, 0) / slots if slots else 0.0
            for op in ("grid_distortion", "first_blur", "resize", "noise", "jpeg",
                       "second_blur", "sinc", "color_shift", "translucent_mask",
                       "camera_jitter")}
    return {
        "trials": trials,
        "no_aug_frequency": no_aug / trials if trials else 0.0,
        "augmented_view_slots": slots,
        "stage_frequencies": freq,
    }
