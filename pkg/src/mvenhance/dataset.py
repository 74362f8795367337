"""Multi-view dataset loading/writing and synthetic toy scenes.

Directory layout::

    view_000.png ... view_00N.png   8-bit RGB images
    mask_000.png ... (optional)     8-bit grayscale object masks
    cameras.json                    [{fx, fy, cx, cy, width, height, c2w}, ...]

``c2w`` is 16 row-major floats of the world-from-camera transform
(right-handed, camera looks down -Z). Views are ordered by azimuth on load;
missing masks are synthesized by white-background thresholding.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .batch import MultiViewBatch, synthesize_masks
from .cameras import CameraPose, azimuth_of, orbit_pose
from .errors import CountMismatch, InvalidPose, MalformedJson, MissingCameras
from .voxels import VoxelScene, camera_rays, render_rays

_REQUIRED_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "c2w")


def load_dataset(directory) -> MultiViewBatch:
    """Load a view directory into a batch, validating everything by name."""
    directory = Path(directory)
    view_files = sorted(directory.glob("view_*.png"))
    if not view_files:
        raise CountMismatch(f"no view_*.png files in {directory}")
    cam_path = directory / "cameras.json"
    if not cam_path.exists():
        raise MissingCameras(f"{cam_path} is missing")
    try:
        entries = json.loads(cam_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"{cam_path}: {exc}") from exc
    if not isinstance(entries, list):
        raise MalformedJson(f"{cam_path}: expected a JSON array of cameras")
    if len(entries) != len(view_files):
        raise CountMismatch(
            f"{len(view_files)} view images but {len(entries)} entries in {cam_path}"
        )
    poses = []
    for i, entry in enumerate(entries):
        missing = [k for k in _REQUIRED_CAMERA_KEYS if k not in entry]
        if missing:
            raise MalformedJson(f"{cam_path}: camera {i} missing keys {missing}")
        try:
            poses.append(CameraPose.from_dict(entry))
        except InvalidPose as exc:
            raise InvalidPose(f"{cam_path}: camera {i}: {exc}") from exc

    images = np.stack([_load_image(p) for p in view_files])

    mask_files = sorted(directory.glob("mask_*.png"))
    if mask_files:
        if len(mask_files) != len(view_files):
            raise CountMismatch(
                f"{len(view_files)} views but {len(mask_files)} masks in {directory}"
            )
        masks = np.stack([_load_mask(p) for p in mask_files])
    else:
        masks = synthesize_masks(images)

    text = None
    caption_path = directory / "caption.txt"
    if caption_path.exists():
        text = caption_path.read_text().strip()

    order = sorted(range(len(poses)), key=lambda i: azimuth_of(poses[i]))
    return MultiViewBatch(
        images=images[order],
        poses=[poses[i] for i in order],
        masks=masks[order],
        text=text,
    )


def save_dataset(batch: MultiViewBatch, directory):
    """Write a batch back out in the documented layout (8-bit PNG + json)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for v in range(batch.n_views):
        _save_image(batch.images[v], directory / f"view_{v:03d}.png")
        _save_mask(batch.masks[v], directory / f"mask_{v:03d}.png")
    cams = [p.to_dict() for p in batch.poses]
    (directory / "cameras.json").write_text(json.dumps(cams, indent=2))
    if batch.text:
        (directory / "caption.txt").write_text(batch.text)


def _load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _save_image(img: np.ndarray, path):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def _save_mask(mask: np.ndarray, path):
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


# ---------------------------------------------------------------------------
# synthetic toy scenes
# ---------------------------------------------------------------------------

TOY_KINDS = ("checker-cube", "striped-sphere")


def make_toy_voxels(kind: str, resolution: int = 32) -> VoxelScene:
    """Deterministic textured voxel scene used by tests and the demo."""
    if kind not in TOY_KINDS:
        raise ValueError(f"kind must be one of {TOY_KINDS}, got {kind!r}")
    g = resolution
    axis = (np.arange(g) + 0.5) / g * 2.0 - 1.0  # cell centers in [-1, 1]
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    colors = np.zeros((g, g, g, 3))
    density = np.zeros((g, g, g))
    if kind == "checker-cube":
        inside = (np.abs(x) <= 0.6) & (np.abs(y) <= 0.6) & (np.abs(z) <= 0.6)
        parity = (np.floor((x + 0.6) / 0.3) + np.floor((y + 0.6) / 0.3)
                  + np.floor((z + 0.6) / 0.3)).astype(int) % 2
        col_a = np.array([0.85, 0.15, 0.15])
        col_b = np.array([0.15, 0.25, 0.85])
        colors[...] = np.where(parity[..., None] == 0, col_a, col_b)
        density[inside] = 300.0
    else:  # striped-sphere
        r = np.sqrt(x ** 2 + y ** 2 + z ** 2)
        inside = r <= 0.65
        stripes = (np.floor((y + 1.0) / 0.2)).astype(int) % 2
        col_a = np.array([0.9, 0.75, 0.1])
        col_b = np.array([0.1, 0.55, 0.3])
        colors[...] = np.where(stripes[..., None] == 0, col_a, col_b)
        density[inside] = 300.0
    colors[~inside] = 1.0
    return VoxelScene(
        colors=torch.from_numpy(colors),
        density=torch.from_numpy(density),
        bbox_min=np.array([-1.0, -1.0, -1.0]),
        bbox_max=np.array([1.0, 1.0, 1.0]),
    )


def render_batch(scene: VoxelScene, poses, h: int, w: int, samples: int = 96,
                 text: str | None = None) -> MultiViewBatch:
    """Render posed views of a scene into a batch with alpha-derived masks."""
    images = []
    masks = []
    for pose in poses:
        origin, dirs = camera_rays(pose, h, w)
        with torch.no_grad():
            rgb = render_rays(scene, origin, dirs, samples)
        img = np.clip(rgb.numpy(), 0.0, 1.0)
        images.append(img)
        masks.append(~(img > 252.0 / 255.0).all(axis=-1))
    return MultiViewBatch(images=np.stack(images), poses=list(poses),
                          masks=np.stack(masks), text=text)


def make_toy_scene(kind: str = "checker-cube", seed: int = 0,
                   n_views: int = 4, image_size: int = 64,
                   resolution: int = 32):
    """(VoxelScene, MultiViewBatch): a textured object plus rendered views.

    Views sample azimuths uniformly in [0, 360) and elevations in [-5, 30]
    degrees under the given seed, then are sorted by azimuth.
    """
    scene = make_toy_voxels(kind, resolution)
    rng = np.random.default_rng(seed)
    azimuths = np.sort(rng.uniform(0.0, 360.0, n_views))
    elevations = rng.uniform(-5.0, 30.0, n_views)
    poses = [orbit_pose(float(a), float(e), radius=2.6,
                        width=image_size, height=image_size)
             for a, e in zip(azimuths, elevations)]
    batch = render_batch(scene, poses, image_size, image_size,
                         text=f"toy {kind}")
    return scene, batch

