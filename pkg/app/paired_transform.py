"""
Shared geometric augmentation for an RGB image and its prior map.

Flip, crop/scale and resize to the network resolution are composed into one
2x3 affine matrix and both inputs are resampled once through it, so the
image and the prior stay pixel-aligned by construction.
"""

import dataclasses
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.errors import ShapeMismatch
from app.kitti_io import Label3D
from app.tensor_core import Tensor

TARGET_SIZE = (384, 1280)  # (height, width)
SCALE_RANGE = (0.5, 2.0)


class TransformSpec(BaseModel):
    """One draw of the paired augmentation."""

    model_config = ConfigDict(frozen=True)

    hflip: bool = False
    crop_center: tuple[float, float]  # (cx, cy) in source pixels
    crop_scale: float = Field(default=1.0, ge=SCALE_RANGE[0], le=SCALE_RANGE[1])
    target: tuple[int, int] = TARGET_SIZE
    seed: int = 0

    @field_validator("target")
    @classmethod
    def _fixed_target(cls, value: tuple[int, int]) -> tuple[int, int]:
        if tuple(value) != TARGET_SIZE:
            raise ValueError(f"target resolution is fixed at {TARGET_SIZE}, got {value}")
        return value

    def matrix(self, source_size: tuple[int, int]) -> np.ndarray:
        """2x3 matrix mapping output (col, row, 1) to source (col, row) indices.

        Pixel ``i`` covers the continuous interval [i, i + 1). The crop window
        is ``source_size / crop_scale`` centered on ``crop_center`` of the
        (optionally mirrored) source, resampled to ``target``.
        """
        src_h, src_w = source_size
        out_h, out_w = self.target
        cx, cy = self.crop_center
        win_w = src_w / self.crop_scale
        win_h = src_h / self.crop_scale
        left = cx - win_w / 2.0
        top = cy - win_h / 2.0
        sx = win_w / out_w
        sy = win_h / out_h
        if self.hflip:
            row_x = [-sx, 0.0, src_w - left - 0.5 * sx - 0.5]
        else:
            row_x = [sx, 0.0, left + 0.5 * sx - 0.5]
        row_y = [0.0, sy, top + 0.5 * sy - 0.5]
        return np.array([row_x, row_y])


def _center_range(size: float, window: float) -> tuple[float, float]:
    lo, hi = window / 2.0, size - window / 2.0
    return (min(lo, hi), max(lo, hi))


def sample_transform(
    seed: int, augment: bool, image_size: tuple[int, int] = TARGET_SIZE
) -> TransformSpec:
    """Deterministic augmentation draw for ``seed``.

    Without ``augment`` the result is the identity configuration: no flip,
    centered window, scale 1. With it, the flip is a fair coin, the scale is
    uniform over the allowed range and the window center is uniform over the
    positions that keep the window inside the image (or the image inside the
    window when zoomed out).
    """
    height, width = image_size
    if not augment:
        return TransformSpec(crop_center=(width / 2.0, height / 2.0), seed=seed)

    rng = np.random.default_rng(seed & 0xFFFF_FFFF_FFFF_FFFF)
    hflip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*SCALE_RANGE))
    cx = float(rng.uniform(*_center_range(width, width / scale)))
    cy = float(rng.uniform(*_center_range(height, height / scale)))
    return TransformSpec(hflip=hflip, crop_center=(cx, cy), crop_scale=scale, seed=seed)


def warp_bilinear(data: np.ndarray, matrix: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Sample (b, c, H, W) ``data`` on the affine grid; outside reads as 0."""
    _, _, src_h, src_w = data.shape
    out_h, out_w = out_size
    cols, rows = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    x = matrix[0, 0] * cols + matrix[0, 1] * rows + matrix[0, 2]
    y = matrix[1, 0] * cols + matrix[1, 1] * rows + matrix[1, 2]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out = np.zeros(data.shape[:2] + (out_h, out_w))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < src_h) & (xx >= 0) & (xx < src_w)
            weight = np.where(valid, wy * wx, 0.0)
            sample = data[:, :, np.clip(yy, 0, src_h - 1), np.clip(xx, 0, src_w - 1)]
            out += sample * weight
    return out


def apply(image: Tensor, prior: Tensor, spec: TransformSpec) -> tuple[Tensor, Tensor]:
    """Warp the image (1x3xHxW) and its prior (1x1xHxW) with the same matrix."""
    if image.shape[:2] != (1, 3) or prior.shape[:2] != (1, 1):
        raise ShapeMismatch(
            f"expected a 1x3xHxW image and a 1x1xHxW prior, got {image.shape} and {prior.shape}"
        )
    if image.spatial != prior.spatial:
        raise ShapeMismatch(f"image is {image.spatial}, prior is {prior.spatial}")
    matrix = spec.matrix(image.spatial)
    return (
        Tensor(warp_bilinear(image.data, matrix, spec.target)),
        Tensor(warp_bilinear(prior.data, matrix, spec.target)),
    )


def _wrap_angle(theta: float) -> float:
    return math.remainder(theta, 2.0 * math.pi)


def flip_label(label: Label3D, image_width: float) -> Label3D:
    """Mirror a label under a horizontal image flip.

    The 2D box is mirrored, ``location.x`` negated and the yaw angles mapped to
    the mirrored heading. DontCare regions only have their box mirrored.
    """
    left, top, right, bottom = label.bbox2d
    bbox = (image_width - right, top, image_width - left, bottom)
    if label.is_dontcare:
        return dataclasses.replace(label, bbox2d=bbox)
    x, y, z = label.location
    return dataclasses.replace(
        label,
        bbox2d=bbox,
        location=(-x, y, z),
        alpha=_wrap_angle(math.pi - label.alpha),
        rotation_y=_wrap_angle(math.pi - label.rotation_y),
    )
