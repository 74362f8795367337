"""Camera model: intrinsics plus a rigid world-from-camera transform.

Conventions (used everywhere in this package):
  * right-handed world, +Y is up;
  * camera frame: +X right, +Y up, the camera looks down its -Z axis;
  * ``rotation`` maps camera-frame directions to world-frame directions;
  * pixel (row i, col j) has continuous image coordinates (j + 0.5, i + 0.5),
    i.e. rays pass through pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPose

ORTHONORMALITY_TOL = 1e-9


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: intrinsics in pixels plus world-from-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # 3x3, world-from-camera, det +1
    center: np.ndarray    # camera center in world units, shape (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        ctr = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", ctr)
        self.validate()

    def validate(self):
        if self.rotation.shape != (3, 3):
            raise InvalidPose(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= ORTHONORMALITY_TOL:
            raise InvalidPose(f"rotation not orthonormal (|R^T R - I|_max = {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise InvalidPose("rotation has negative determinant (left-handed)")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidPose(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidPose(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def camera_to_world(self) -> np.ndarray:
        """4x4 rigid transform (row-major [R | c; 0 1])."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.center
        return m

    def pixel_to_projective(self) -> np.ndarray:
        """Matrix B with  (u, v, 1) ~ B @ x_cam  for camera-frame points x_cam.

        Encodes the -Z viewing direction and the image-down v axis, so pixel
        fundamental matrices can be built as B_b^-T E B_a^-1.
        """
        return np.array(
            [
                [self.fx, 0.0, -self.cx],
                [0.0, -self.fy, -self.cy],
                [0.0, 0.0, -1.0],
            ]
        )

    def scaled_to(self, height: int, width: int) -> "CameraPose":
        """Same camera re-expressed on a ``height`` x ``width`` pixel grid."""
        sx = width / self.width
        sy = height / self.height
        return CameraPose(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
            rotation=self.rotation,
            center=self.center,
        )

    def pixel_ray(self, u: float, v: float) -> np.ndarray:
        """Unit world-space direction of the ray through image point (u, v)."""
        d_cam = np.array([(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0])
        d = self.rotation @ d_cam
        return d / np.linalg.norm(d)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project world points (N, 3) to continuous pixel coords (N, 2).

        Points behind the camera produce unreliable values; callers that care
        should check ``depths`` from :meth:`project_with_depth`.
        """
        return self.project_with_depth(points)[0]

    def project_with_depth(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = (pts - self.center) @ self.rotation  # == R^T (p - c) row-wise
        depth = -cam[:, 2]  # positive in front of the camera
        u = self.fx * cam[:, 0] / depth + self.cx
        v = -self.fy * cam[:, 1] / depth + self.cy
        return np.stack([u, v], axis=1), depth

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": int(self.width),
            "height": int(self.height),
            "c2w": [float(x) for x in self.camera_to_world.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        c2w = np.asarray(d["c2w"], dtype=np.float64)
        if c2w.size != 16:
            raise InvalidPose(f"c2w must hold 16 floats, got {c2w.size}")
        c2w = c2w.reshape(4, 4)
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=c2w[:3, :3],
            center=c2w[:3, 3],
        )


def look_at_rotation(center: np.ndarray, target: np.ndarray,
                     up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - center
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidPose("look-at target coincides with camera center")
    forward = forward / norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise InvalidPose("viewing direction parallel to the up vector")
    right = right / rnorm
    true_up = np.cross(right, forward)
    # columns: camera x (right), y (up), z (backward)
    return np.stack([right, true_up, -forward], axis=1)


def orbit_pose(azimuth_deg: float, elevation_deg: float, radius: float,
               look_at=(0.0, 0.0, 0.0), width: int = 64, height: int = 64,
               focal: float | None = None) -> CameraPose:
    """Camera on a look-at orbit. Azimuth 0 sits on +Z, rotating toward +X."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    look_at = np.asarray(look_at, dtype=np.float64)
    offset = radius * np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    center = look_at + offset
    if focal is None:
        focal = 1.2 * width
    return CameraPose(
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        rotation=look_at_rotation(center, look_at),
        center=center,
    )


def orbit_parameters(pose: CameraPose, look_at=(0.0, 0.0, 0.0)):
    """Recover (azimuth_deg, elevation_deg, radius) of an orbit pose."""
    look_at = np.asarray(look_at, dtype=np.float64)
    offset = pose.center - look_at
    radius = float(np.linalg.norm(offset))
    if radius < 1e-12:
        raise InvalidPose("camera center coincides with the orbit look-at point")
    elevation = math.degrees(math.asin(np.clip(offset[1] / radius, -1.0, 1.0)))
    azimuth = math.degrees(math.atan2(offset[0], offset[2])) % 360.0
    return azimuth, elevation, radius


def azimuth_of(pose: CameraPose, look_at=(0.0, 0.0, 0.0)) -> float:
    """Azimuth in degrees of a pose around ``look_at`` (used for view ordering)."""
    return orbit_parameters(pose, look_at)[0]
