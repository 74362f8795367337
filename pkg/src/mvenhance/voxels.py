"""Differentiable voxel scene: emission-absorption renderer and refinement.

The scene is a dense G^3 grid of RGB color and non-negative density inside an
axis-aligned box. Rendering marches a fixed number of samples per ray with
trilinear interpolation and composites over a white background; gradients flow
to colors and densities, so a scene can be refined against posed target images
with an L1 + pyramid-gradient objective.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .batch import MultiViewBatch
from .cameras import CameraPose, orbit_pose
from .errors import ShapeMismatch
from .geometry import compute_plucker

SCENE_MAGIC = b"MVVOX001"


@dataclass
class VoxelScene:
    """G^3 voxel grid: colors in [0, 1], densities >= 0, world-space bbox."""

    colors: torch.Tensor   # (G, G, G, 3)
    density: torch.Tensor  # (G, G, G)
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.colors = torch.as_tensor(self.colors)
        self.density = torch.as_tensor(self.density)
        g = self.density.shape[0]
        if self.density.shape != (g, g, g) or self.colors.shape != (g, g, g, 3):
            raise ShapeMismatch(
                f"grid shapes disagree: colors {tuple(self.colors.shape)}, "
                f"density {tuple(self.density.shape)}"
            )
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not (self.bbox_max > self.bbox_min).all():
            raise ValueError("bbox_max must exceed bbox_min on every axis")
        if not bool(torch.isfinite(self.colors).all() and torch.isfinite(self.density).all()):
            raise ValueError("scene contains non-finite values")

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    def clone(self) -> "VoxelScene":
        return VoxelScene(self.colors.detach().clone(), self.density.detach().clone(),
                          self.bbox_min.copy(), self.bbox_max.copy())

    def clamped_(self) -> "VoxelScene":
        with torch.no_grad():
            self.colors.clamp_(0.0, 1.0)
            self.density.clamp_(min=0.0)
        return self


@dataclass
class OrbitTrajectory:
    """n cameras on a circular path with uniform azimuth spacing."""

    poses: list
    azimuths: np.ndarray
    elevation: float
    radius: float
    look_at: np.ndarray

    def __post_init__(self):
        if not (np.diff(self.azimuths) > 0).all():
            raise ValueError("azimuths must be strictly increasing")
        for p in self.poses:
            p.validate()


@dataclass
class RefineResult:
    scene: VoxelScene
    losses: list = field(default_factory=list)


def orbit_sampler(n: int = 100, elevation: float = 15.0, radius: float = 2.6,
                  look_at=(0.0, 0.0, 0.0), width: int = 64, height: int = 64,
                  focal: float | None = None,
                  azimuth_offset: float = 0.0) -> OrbitTrajectory:
    """Uniformly spaced look-at cameras on one orbital path."""
    if n < 2:
        raise ValueError(f"orbit needs at least 2 poses, got {n}")
    azimuths = azimuth_offset + np.arange(n) * (360.0 / n)
    poses = [orbit_pose(a, elevation, radius, look_at, width, height, focal)
             for a in azimuths]
    return OrbitTrajectory(poses=poses, azimuths=azimuths, elevation=elevation,
                           radius=radius, look_at=np.asarray(look_at, dtype=np.float64))


def camera_rays(pose: CameraPose, h: int, w: int):
    """(origin (3,), unit directions (h, w, 3)) as float64 torch tensors."""
    rays = compute_plucker(pose, h, w)
    return (torch.as_tensor(pose.center, dtype=torch.float64),
            torch.from_numpy(np.ascontiguousarray(rays.directions)))


def _trilinear(scene: VoxelScene, pts: torch.Tensor):
    """Interpolated (color, density) at world points (..., 3)."""
    g = scene.resolution
    bmin = torch.as_tensor(scene.bbox_min, dtype=pts.dtype)
    bmax = torch.as_tensor(scene.bbox_max, dtype=pts.dtype)
    coords = (pts - bmin) / (bmax - bmin) * (g - 1)
    coords = coords.clamp(0.0, g - 1.0)
    i0 = coords.floor().long().clamp(max=g - 2)
    frac = coords - i0
    fx, fy, fz = frac[..., 0:1], frac[..., 1:2], frac[..., 2:3]

    dens = scene.density.reshape(-1)
    cols = scene.colors.reshape(-1, 3)
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]

    color = None
    density = None
    for dx in (0, 1):
        wx = (1 - fx) if dx == 0 else fx
        for dy in (0, 1):
            wy = (1 - fy) if dy == 0 else fy
            for dz in (0, 1):
                wz = (1 - fz) if dz == 0 else fz
                lin = ((ix + dx) * g + (iy + dy)) * g + (iz + dz)
                wgt = wx * wy * wz
                c = cols[lin] * wgt
                d = dens[lin] * wgt[..., 0]
                color = c if color is None else color + c
                density = d if density is None else density + d
    return color, density


def render_rays(scene: VoxelScene, origin: torch.Tensor, dirs: torch.Tensor,
                samples: int = 64) -> torch.Tensor:
    """Emission-absorption march over ``samples`` fixed steps per ray."""
    dtype = scene.colors.dtype
    origin = origin.to(dtype)
    dirs = dirs.to(dtype)
    bmin = torch.as_tensor(scene.bbox_min, dtype=dtype)
    bmax = torch.as_tensor(scene.bbox_max, dtype=dtype)

    safe = torch.where(dirs.abs() < 1e-12,
                       torch.full_like(dirs, 1e-12), dirs)
    t1 = (bmin - origin) / safe
    t2 = (bmax - origin) / safe
    near = torch.minimum(t1, t2).amax(dim=-1).clamp(min=0.0)
    far = torch.maximum(t1, t2).amin(dim=-1)
    hit = far > near
    span = torch.where(hit, far - near, torch.zeros_like(far))

    offsets = (torch.arange(samples, dtype=dtype) + 0.5) / samples
    ts = near[..., None] + span[..., None] * offsets  # (..., S)
    pts = origin + dirs[..., None, :] * ts[..., None]
    color, density = _trilinear(scene, pts)

    dt = (span / samples)[..., None]
    sigma_dt = density * dt
    alpha = 1.0 - torch.exp(-sigma_dt)
    before = torch.cat([torch.zeros_like(sigma_dt[..., :1]),
                        torch.cumsum(sigma_dt, dim=-1)[..., :-1]], dim=-1)
    weights = torch.exp(-before) * alpha
    rgb = (weights[..., None] * color).sum(dim=-2)
    return rgb + (1.0 - weights.sum(dim=-1))[..., None]  # white background


def render(scene: VoxelScene, pose: CameraPose, h: int, w: int,
           samples: int = 64) -> torch.Tensor:
    """Render an (h, w, 3) image; differentiable w.r.t. colors and densities."""
    origin, dirs = camera_rays(pose, h, w)
    return render_rays(scene, origin, dirs, samples)


def perceptual_proxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute gradient-magnitude difference over a 3-level pyramid.

    Invariant to constant offsets (a stand-in for learned perceptual
    distances); zero iff both images share every pyramid gradient.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"images disagree: {tuple(a.shape)} vs {tuple(b.shape)}")

    def grad_mag(x):
        img = x.permute(2, 0, 1)[None]  # (1, C, H, W)
        px = F.pad(img, (0, 1, 0, 0), mode="replicate")
        py = F.pad(img, (0, 0, 0, 1), mode="replicate")
        gx = px[..., :, 1:] - px[..., :, :-1]
        gy = py[..., 1:, :] - py[..., :-1, :]
        return torch.sqrt(gx ** 2 + gy ** 2 + 1e-12)

    def down(x):
        img = x.permute(2, 0, 1)[None]
        k1 = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=x.dtype) / 16.0
        kx = k1.reshape(1, 1, 1, 5).expand(img.shape[1], 1, 1, 5)
        ky = k1.reshape(1, 1, 5, 1).expand(img.shape[1], 1, 5, 1)
        img = F.conv2d(F.pad(img, (2, 2, 0, 0), mode="replicate"), kx,
                       groups=img.shape[1])
        img = F.conv2d(F.pad(img, (0, 0, 2, 2), mode="replicate"), ky,
                       groups=img.shape[1])
        return img[0].permute(1, 2, 0)[::2, ::2]

    total = None
    for _ in range(3):
        diff = (grad_mag(a) - grad_mag(b)).abs().mean()
        total = diff if total is None else total + diff
        if min(a.shape[0], a.shape[1]) >= 4:
            a, b = down(a), down(b)
    return total / 3.0


def refine(scene: VoxelScene, targets: MultiViewBatch, steps: int = 2000,
           lambda_perceptual: float = 0.5, lr: float = 1e-2,
           samples: int = 48, plateau_window: int = 100,
           verbose: bool = False) -> RefineResult:
    """Adaptive gradient descent of scene colors/densities against targets.

    Per step: render every target view (fixed view order), accumulate
    L1 + lambda * proxy, take one Adam step, and re-clamp colors to [0, 1] and
    densities to >= 0. The learning rate halves when the mean loss over the
    last ``plateau_window`` steps stops improving.
    """
    out = scene.clone()
    result = RefineResult(scene=out)
    if steps <= 0:
        return result
    h, w = targets.height, targets.width
    rays = [camera_rays(p, h, w) for p in targets.poses]
    dtype = out.colors.dtype
    target_tensors = [torch.as_tensor(targets.images[v], dtype=dtype)
                      for v in range(targets.n_views)]
    out.colors.requires_grad_(True)
    out.density.requires_grad_(True)
    opt = torch.optim.Adam([out.colors, out.density], lr=lr)
    for step in range(steps):
        loss = None
        for v in range(targets.n_views):
            rendered = render_rays(out, rays[v][0], rays[v][1], samples)
            term = (rendered - target_tensors[v]).abs().mean()
            if lambda_perceptual > 0:
                term = term + lambda_perceptual * perceptual_proxy(
                    rendered, target_tensors[v])
            loss = term if loss is None else loss + term
        opt.zero_grad()
        loss.backward()
        opt.step()
        out.clamped_()
        result.losses.append(float(loss.detach()))
        if (step + 1) % plateau_window == 0 and step + 1 >= 2 * plateau_window:
            last = np.mean(result.losses[-plateau_window:])
            prev = np.mean(result.losses[-2 * plateau_window:-plateau_window])
            if last > prev * (1.0 - 1e-4):
                for grp in opt.param_groups:
                    grp["lr"] *= 0.5
        if verbose and (step + 1) % plateau_window == 0:
            print(f"  step {step + 1}/{steps}  loss {result.losses[-1]:.6f}")
    out.colors.requires_grad_(False)
    out.density.requires_grad_(False)
    return result


# ---------------------------------------------------------------------------
# scene container format
# ---------------------------------------------------------------------------

def save_scene(scene: VoxelScene, path):
    """Binary container: magic, G (uint32 LE), bbox (6 float32 LE), then
    row-major density (G^3 float32) and RGB (G^3 x 3 float32)."""
    g = scene.resolution
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<I", g))
        fh.write(struct.pack("<6f", *scene.bbox_min, *scene.bbox_max))
        fh.write(scene.density.detach().numpy().astype("<f4").tobytes(order="C"))
        fh.write(scene.colors.detach().numpy().astype("<f4").tobytes(order="C"))


def load_scene(path) -> VoxelScene:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != SCENE_MAGIC:
            raise ValueError(f"not a voxel scene file (magic {magic!r})")
        g = struct.unpack("<I", fh.read(4))[0]
        bbox = struct.unpack("<6f", fh.read(24))
        density = np.frombuffer(fh.read(g ** 3 * 4), dtype="<f4").reshape(g, g, g)
        colors = np.frombuffer(fh.read(g ** 3 * 12), dtype="<f4").reshape(g, g, g, 3)
    return VoxelScene(
        colors=torch.from_numpy(colors.astype(np.float64)),
        density=torch.from_numpy(density.astype(np.float64)),
        bbox_min=np.asarray(bbox[:3]), bbox_max=np.asarray(bbox[3:]),
    )
