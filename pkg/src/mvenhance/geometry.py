"""Epipolar geometry: ray maps, fundamental matrices, lines, bands.

All functions here are pure; token-grid variants place the center of token
(row i, col j) at integer coordinates (x=j, y=i) in token units, which is the
pixel-center convention rescaled by the feature downsampling factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import CameraPose
from .errors import DegenerateCameraPair, EpipoleAtInfinityDegenerate

CENTER_COINCIDENCE_TOL = 1e-9


@dataclass(frozen=True)
class PluckerRayMap:
    """Per-pixel rays as 6-vectors: unit direction then moment (origin x direction)."""

    grid: np.ndarray  # (H, W, 6)

    @property
    def directions(self) -> np.ndarray:
        return self.grid[..., :3]

    @property
    def moments(self) -> np.ndarray:
        return self.grid[..., 3:]


@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2, Frobenius-normalized matrix with x_b^T F x_a = 0 for correspondences."""

    m: np.ndarray  # 3x3
    view_a: int = 0
    view_b: int = 1


def compute_plucker(pose: CameraPose, h: int, w: int) -> PluckerRayMap:
    """Ray map through the centers of an ``h`` x ``w`` pixel grid.

    The camera's intrinsics are rescaled to the requested grid, so the map can
    be evaluated at full image resolution or at feature-grid resolution.
    """
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    pose.validate()
    cam = pose.scaled_to(h, w)
    u = np.arange(w, dtype=np.float64) + 0.5
    v = np.arange(h, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [(uu - cam.cx) / cam.fx, -(vv - cam.cy) / cam.fy, -np.ones_like(uu)], axis=-1
    )
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    moment = np.cross(np.broadcast_to(cam.center, d.shape), d)
    return PluckerRayMap(grid=np.concatenate([d, moment], axis=-1))


def _skew(t: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -t[2], t[1]],
            [t[2], 0.0, -t[0]],
            [-t[1], t[0], 0.0],
        ]
    )


def fundamental_matrix(pose_a: CameraPose, pose_b: CameraPose,
                       view_a: int = 0, view_b: int = 1) -> FundamentalMatrix:
    """Fundamental matrix mapping pixels of view a to epipolar lines in view b.

    Built from the relative pose through the essential matrix, projected to
    rank 2 by zeroing the smallest singular value, Frobenius-normalized, and
    given a deterministic sign (largest-magnitude entry positive).
    """
    baseline = np.linalg.norm(pose_a.center - pose_b.center)
    if baseline <= CENTER_COINCIDENCE_TOL:
        raise DegenerateCameraPair(
            f"camera centers coincide (distance {baseline:.3e}); no epipolar geometry"
        )
    # camera-b coords of a camera-a point: x_b = R_rel x_a + t_rel
    r_rel = pose_b.rotation.T @ pose_a.rotation
    t_rel = pose_b.rotation.T @ (pose_a.center - pose_b.center)
    essential = _skew(t_rel) @ r_rel
    b_a = pose_a.pixel_to_projective()
    b_b = pose_b.pixel_to_projective()
    f = np.linalg.inv(b_b).T @ essential @ np.linalg.inv(b_a)
    # enforce rank 2 and unit Frobenius norm
    u, s, vt = np.linalg.svd(f)
    s[-1] = 0.0
    f = (u * s) @ vt
    f /= np.linalg.norm(f)
    flat_idx = np.abs(f).argmax()
    if f.reshape(-1)[flat_idx] < 0:
        f = -f
    return FundamentalMatrix(m=f, view_a=view_a, view_b=view_b)


def epipolar_line(f: FundamentalMatrix, pixel) -> np.ndarray:
    """Epipolar line (a, b, c) in view b for a point of view a, with a^2+b^2=1.

    After normalization the point-line distance is simply |a*u + b*v + c|.
    """
    u, v = float(pixel[0]), float(pixel[1])
    line = f.m @ np.array([u, v, 1.0])
    norm = np.hypot(line[0], line[1])
    if norm < 1e-12:
        raise EpipoleAtInfinityDegenerate(
            f"epipolar line of ({u}, {v}) has no finite direction"
        )
    return line / norm


def epipolar_band(line, h_f: int, w_f: int, eps: float):
    """Token coordinates (row, col) within ``eps`` of a line, row-major.

    Token (i, j) sits at (x=j, y=i). The line may be unnormalized; a line with
    vanishing (a, b) has no well-defined distance and yields an empty band.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    a, b, c = float(line[0]), float(line[1]), float(line[2])
    norm = np.hypot(a, b)
    if norm < 1e-12:
        return []
    a, b, c = a / norm, b / norm, c / norm
    cols = np.arange(w_f, dtype=np.float64)
    rows = np.arange(h_f, dtype=np.float64)
    dist = np.abs(a * cols[None, :] + b * rows[:, None] + c)
    ii, jj = np.nonzero(dist <= eps)
    return list(zip(ii.tolist(), jj.tolist()))


def token_scale_matrix(h_f: int, w_f: int, height: int, width: int) -> np.ndarray:
    """Homogeneous map from token coords (x=col, y=row, 1) to pixel coords."""
    sx = width / w_f
    sy = height / h_f
    return np.array(
        [
            [sx, 0.0, 0.5 * sx],
            [0.0, sy, 0.5 * sy],
            [0.0, 0.0, 1.0],
        ]
    )


def token_fundamental_matrix(pose_a: CameraPose, pose_b: CameraPose,
                             h_f: int, w_f: int,
                             view_a: int = 0, view_b: int = 1) -> FundamentalMatrix:
    """Fundamental matrix expressed in token-grid coordinates of both views.

    Token (i, j) inherits the epipolar geometry of its pixel-space center, so
    the pixel matrix is conjugated with the token-to-pixel scale maps and
    re-normalized.
    """
    f_pix = fundamental_matrix(pose_a, pose_b, view_a, view_b)
    s_a = token_scale_matrix(h_f, w_f, pose_a.height, pose_a.width)
    s_b = token_scale_matrix(h_f, w_f, pose_b.height, pose_b.width)
    f = s_b.T @ f_pix.m @ s_a
    f /= np.linalg.norm(f)
    flat_idx = np.abs(f).argmax()
    if f.reshape(-1)[flat_idx] < 0:
        f = -f
    return FundamentalMatrix(m=f, view_a=view_a, view_b=view_b)


def row_approximation_error(poses, h_f: int, w_f: int) -> float:
    """Worst vertical gap (in token rows) between epipolar lines and flat rows.

    For every adjacent view pair and every token, the epipolar line of that
    token is evaluated in the other view at the token's own column; the
    deviation from the token's row measures how well same-row attention
    approximates the epipolar constraint. Vertical lines are counted as a
    full-grid deviation.
    """
    if len(poses) < 2:
        raise ValueError("need at least two poses")
    cols = np.arange(w_f, dtype=np.float64)
    rows = np.arange(h_f, dtype=np.float64)
    xx, yy = np.meshgrid(cols, rows)
    pts = np.stack([xx, yy, np.ones_like(xx)], axis=-1)  # (h_f, w_f, 3)
    worst = 0.0
    for a in range(len(poses) - 1):
        for src, dst in ((poses[a], poses[a + 1]), (poses[a + 1], poses[a])):
            f_tok = token_fundamental_matrix(src, dst, h_f, w_f).m
            lines = pts @ f_tok.T  # line of each source token, in the other view
            a_l, b_l, c_l = lines[..., 0], lines[..., 1], lines[..., 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                v_line = -(a_l * xx + c_l) / b_l
            dev = np.abs(v_line - yy)
            dev = np.where(np.abs(b_l) < 1e-9, float(h_f), dev)
            worst = max(worst, float(dev.max()))
    return worst
