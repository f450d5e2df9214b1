"""
Rotated-box overlap in the KITTI camera frame.

Boxes live in the rectified camera frame: x to the right, y down, z forward,
yaw (``rotation_y``) about the y axis. The bird's-eye view drops y and works
in the (x, z) plane; the 3D overlap multiplies the footprint intersection by
the overlap of the vertical extents.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np

Point = tuple[float, float]

# Relative area below which a clipped polygon counts as empty.
_AREA_EPS = 1e-12


@dataclass(frozen=True)
class BevBox:
    """Footprint of a 3D box on the ground plane."""

    center: tuple[float, float]  # (x, z) meters
    size: tuple[float, float]  # (length, width) meters
    yaw: float

    def __post_init__(self) -> None:
        length, width = self.size
        if not (length > 0 and width > 0):
            raise ValueError(f"BEV box needs positive length and width, got {self.size}")

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]

    def corners(self) -> np.ndarray:
        """Four (x, z) corners, counter-clockwise in the (x, z) plane."""
        length, width = self.size
        dx = np.array([0.5, -0.5, -0.5, 0.5]) * length
        dz = np.array([0.5, 0.5, -0.5, -0.5]) * width
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # Same rotation as the camera-frame R_y(yaw) restricted to (x, z).
        xs = self.center[0] + c * dx + s * dz
        zs = self.center[1] - s * dx + c * dz
        return np.stack([xs, zs], axis=1)


class Box3DLike(Protocol):
    """Anything carrying KITTI 3D box geometry (labels and detections)."""

    @property
    def dims3d(self) -> tuple[float, float, float]: ...  # (height, width, length)

    @property
    def location(self) -> tuple[float, float, float]: ...  # bottom center

    @property
    def rotation_y(self) -> float: ...


def bev_box_of(box: Box3DLike) -> BevBox:
    height, width, length = box.dims3d
    x, _, z = box.location
    return BevBox(center=(x, z), size=(length, width), yaw=box.rotation_y)


def polygon_area(polygon: Sequence[Point]) -> float:
    """Signed shoelace area, positive for counter-clockwise vertex order."""
    n = len(polygon)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def _ccw(polygon: Sequence[Point]) -> list[Point]:
    pts = [(float(x), float(y)) for x, y in polygon]
    if polygon_area(pts) < 0:
        pts.reverse()
    return pts


def _inside(p: Point, a: Point, b: Point) -> bool:
    # Left of (or on) the directed edge a -> b.
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0


def _edge_intersection(p: Point, q: Point, a: Point, b: Point) -> Point:
    """Intersection of segment p-q with the infinite line through a-b."""
    dx_pq, dy_pq = q[0] - p[0], q[1] - p[1]
    dx_ab, dy_ab = b[0] - a[0], b[1] - a[1]
    denom = dx_pq * dy_ab - dy_pq * dx_ab
    if denom == 0.0:
        return q
    t = ((a[0] - p[0]) * dy_ab - (a[1] - p[1]) * dx_ab) / denom
    return (p[0] + t * dx_pq, p[1] + t * dy_pq)


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman clipping of ``subject`` against the convex ``clip``.

    Both polygons are normalized to counter-clockwise order first. Returns the
    vertices of the intersection polygon (possibly empty).
    """
    output = _ccw(subject)
    clip_pts = _ccw(clip)
    for i in range(len(clip_pts)):
        a = clip_pts[i]
        b = clip_pts[(i + 1) % len(clip_pts)]
        candidates = output
        output = []
        if not candidates:
            break
        prev = candidates[-1]
        for cur in candidates:
            cur_in = _inside(cur, a, b)
            prev_in = _inside(prev, a, b)
            if cur_in:
                if not prev_in:
                    output.append(_edge_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_edge_intersection(prev, cur, a, b))
            prev = cur
    return output


def _aabb_disjoint(a: np.ndarray, b: np.ndarray) -> bool:
    return bool(
        a[:, 0].max() < b[:, 0].min()
        or b[:, 0].max() < a[:, 0].min()
        or a[:, 1].max() < b[:, 1].min()
        or b[:, 1].max() < a[:, 1].min()
    )


def bev_intersection_area(a: BevBox, b: BevBox) -> float:
    ca, cb = a.corners(), b.corners()
    if _aabb_disjoint(ca, cb):
        return 0.0
    clipped = clip_convex(ca.tolist(), cb.tolist())
    area = abs(polygon_area(clipped))
    if area <= _AREA_EPS * max(a.area, b.area):
        return 0.0
    return min(area, a.area, b.area)


def bev_iou(a: BevBox, b: BevBox) -> float:
    """Bird's-eye-view IoU of two rotated rectangles, in [0, 1]."""
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def vertical_overlap(a: Box3DLike, b: Box3DLike) -> float:
    """Length of the shared y-extent; KITTI locations sit on the box bottom."""
    ya_bottom, yb_bottom = a.location[1], b.location[1]
    ya_top, yb_top = ya_bottom - a.dims3d[0], yb_bottom - b.dims3d[0]
    return max(0.0, min(ya_bottom, yb_bottom) - max(ya_top, yb_top))


def iou_3d(a: Box3DLike, b: Box3DLike) -> float:
    """Volumetric IoU of two yawed 3D boxes."""
    overlap_h = vertical_overlap(a, b)
    if overlap_h == 0.0:
        return 0.0
    inter_area = bev_intersection_area(bev_box_of(a), bev_box_of(b))
    if inter_area == 0.0:
        return 0.0
    vol_int = inter_area * overlap_h
    vol_a = a.dims3d[0] * a.dims3d[1] * a.dims3d[2]
    vol_b = b.dims3d[0] * b.dims3d[1] * b.dims3d[2]
    return float(min(1.0, max(0.0, vol_int / (vol_a + vol_b - vol_int))))


def bev_iou_of(a: Box3DLike, b: Box3DLike) -> float:
    return bev_iou(bev_box_of(a), bev_box_of(b))


def box2d_overlap_fraction(
    box: tuple[float, float, float, float], region: tuple[float, float, float, float]
) -> float:
    """Share of ``box``'s own area covered by ``region`` (both left, top, right, bottom)."""
    left = max(box[0], region[0])
    top = max(box[1], region[1])
    right = min(box[2], region[2])
    bottom = min(box[3], region[3])
    inter = max(0.0, right - left) * max(0.0, bottom - top)
    area = (box[2] - box[0]) * (box[3] - box[1])
    if area <= 0.0:
        return 0.0
    return inter / area
