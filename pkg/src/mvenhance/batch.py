"""The multi-view batch: N posed images with masks, optional caption, noise level."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cameras import CameraPose
from .errors import ShapeMismatch

WHITE_THRESHOLD = 252.0 / 255.0  # background iff all channels above this


@dataclass
class MultiViewBatch:
    """N x H x W x 3 images in [0, 1] plus per-view poses and object masks."""

    images: np.ndarray
    poses: list
    masks: np.ndarray | None = None
    text: str | None = None
    noise_level: int = 0

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim != 4 or imgs.shape[-1] != 3:
            raise ShapeMismatch(f"images must be NxHxWx3, got {imgs.shape}")
        if imgs.min() < 0.0 or imgs.max() > 1.0:
            raise ValueError(
                f"pixel values outside [0, 1]: min {imgs.min():.4f}, max {imgs.max():.4f}"
            )
        if len(self.poses) != imgs.shape[0]:
            raise ShapeMismatch(
                f"{imgs.shape[0]} images but {len(self.poses)} poses"
            )
        for p in self.poses:
            if not isinstance(p, CameraPose):
                raise TypeError(f"poses must be CameraPose, got {type(p)}")
        if self.masks is None:
            masks = synthesize_masks(imgs)
        else:
            masks = np.asarray(self.masks).astype(bool)
            if masks.shape != imgs.shape[:3]:
                raise ShapeMismatch(
                    f"masks {masks.shape} do not match images {imgs.shape[:3]}"
                )
        if self.noise_level < 0:
            raise ValueError(f"noise level must be >= 0, got {self.noise_level}")
        self.images = imgs
        self.masks = masks

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def with_images(self, images: np.ndarray, **kwargs) -> "MultiViewBatch":
        return replace(self, images=images, **kwargs)


def synthesize_masks(images: np.ndarray) -> np.ndarray:
    """Object masks from white-background thresholding (background iff all
    channels exceed 252/255)."""
    return ~(images > WHITE_THRESHOLD).all(axis=-1)
