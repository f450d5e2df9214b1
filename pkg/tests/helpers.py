"""
Record builders and brute-force reference implementations shared by tests.

The references are deliberately naive (rasterized areas, exact fractions,
quadratic loops) so they can be trusted without trusting the code under test.
"""

import dataclasses
import math
from collections.abc import Mapping, Sequence
from fractions import Fraction
from pathlib import Path

import numpy as np

from app.geometry import BevBox
from app.kitti_io import Detection, Label3D, format_detections, format_labels

Frames = Mapping[str, Sequence[Label3D]]


def make_label(**overrides: object) -> Label3D:
    fields: dict = {
        "class_name": "Car",
        "truncation": 0.0,
        "occlusion": 0,
        "alpha": 0.0,
        "bbox2d": (100.0, 100.0, 200.0, 160.0),
        "dims3d": (1.5, 1.6, 3.9),
        "location": (0.0, 1.5, 20.0),
        "rotation_y": 0.0,
    }
    fields.update(overrides)
    return Label3D(**fields)


def as_detection(label: Label3D, score: float = 1.0) -> Detection:
    return Detection(**{f.name: getattr(label, f.name) for f in dataclasses.fields(Label3D)}, score=score)


def make_detection(score: float = 0.9, **overrides: object) -> Detection:
    return as_detection(make_label(**overrides), score)


def dontcare(bbox2d: tuple[float, float, float, float]) -> Label3D:
    return Label3D(
        class_name="DontCare",
        truncation=-1.0,
        occlusion=-1,
        alpha=-10.0,
        bbox2d=bbox2d,
        dims3d=(-1.0, -1.0, -1.0),
        location=(-1000.0, -1000.0, -1000.0),
        rotation_y=-10.0,
    )


def write_label_dir(root: Path, frames: Frames) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for frame, labels in frames.items():
        (root / f"{frame}.txt").write_text(format_labels(labels), encoding="ascii")
    return root


def write_detection_dir(root: Path, frames: Mapping[str, Sequence[Detection]]) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for frame, dets in frames.items():
        (root / f"{frame}.txt").write_text(format_detections(dets), encoding="ascii")
    return root


def random_label(rng: np.random.Generator, class_name: str | None = None) -> Label3D:
    """A plausible object somewhere in front of the camera."""
    if class_name is None:
        class_name = str(rng.choice(["Car", "Car", "Pedestrian", "Cyclist", "Van", "Person_sitting"]))
    left = float(rng.uniform(0, 1100))
    top = float(rng.uniform(100, 250))
    height = float(rng.uniform(15, 90))
    return make_label(
        class_name=class_name,
        truncation=float(rng.choice([0.0, 0.1, 0.2, 0.4, 0.6])),
        occlusion=int(rng.integers(0, 4)),
        alpha=float(rng.uniform(-math.pi, math.pi)),
        bbox2d=(left, top, left + float(rng.uniform(20, 150)), top + height),
        dims3d=(float(rng.uniform(1.4, 2.0)), float(rng.uniform(0.6, 2.0)), float(rng.uniform(0.8, 4.5))),
        location=(float(rng.uniform(-15, 15)), float(rng.uniform(1.4, 1.8)), float(rng.uniform(5, 45))),
        rotation_y=float(rng.uniform(-math.pi, math.pi)),
    )


def jitter(rng: np.random.Generator, label: Label3D, score: float) -> Detection:
    """A detection near ``label``: shifted box, same class and image box."""
    x, y, z = label.location
    h, w, length = label.dims3d
    moved = dataclasses.replace(
        label,
        location=(x + float(rng.normal(0, 0.3)), y + float(rng.normal(0, 0.05)), z + float(rng.normal(0, 0.5))),
        dims3d=(h * float(rng.uniform(0.9, 1.1)), w * float(rng.uniform(0.9, 1.1)), length * float(rng.uniform(0.9, 1.1))),
        rotation_y=math.remainder(label.rotation_y + float(rng.normal(0, 0.1)), 2 * math.pi),
    )
    return as_detection(moved, score)


# ---------------------------------------------------------------------------
# BEV IoU by rasterization


def _row_extent(corners: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """x-interval where each horizontal line y crosses a convex polygon."""
    lo = np.full(ys.shape, np.inf)
    hi = np.full(ys.shape, -np.inf)
    n = len(corners)
    for k in range(n):
        (x1, y1), (x2, y2) = corners[k], corners[(k + 1) % n]
        if y1 == y2:
            continue
        t = (ys - y1) / (y2 - y1)
        hit = (t >= 0.0) & (t <= 1.0)
        x = x1 + t * (x2 - x1)
        lo = np.where(hit, np.minimum(lo, x), lo)
        hi = np.where(hit, np.maximum(hi, x), hi)
    return lo, hi


def _centers_between(lo: np.ndarray, hi: np.ndarray, x0: float, dx: float, n: int) -> np.ndarray:
    """Number of pixel centers x0 + (i + 0.5) dx, 0 <= i < n, inside [lo, hi] per row."""
    valid = hi >= lo
    lo = np.where(valid, lo, 0.0)
    hi = np.where(valid, hi, 0.0)
    first = np.maximum(np.ceil((lo - x0) / dx - 0.5), 0)
    last = np.minimum(np.floor((hi - x0) / dx - 0.5), n - 1)
    return np.where(valid, np.maximum(last - first + 1, 0), 0)


def raster_bev_iou(a: BevBox, b: BevBox, grid: int = 2000) -> float:
    ca, cb = a.corners(), b.corners()
    both = np.vstack([ca, cb])
    (x_min, y_min), (x_max, y_max) = both.min(axis=0), both.max(axis=0)
    dx = (x_max - x_min) / grid
    dy = (y_max - y_min) / grid
    ys = y_min + (np.arange(grid) + 0.5) * dy
    lo_a, hi_a = _row_extent(ca, ys)
    lo_b, hi_b = _row_extent(cb, ys)
    count_a = _centers_between(lo_a, hi_a, x_min, dx, grid).sum()
    count_b = _centers_between(lo_b, hi_b, x_min, dx, grid).sum()
    inter = _centers_between(np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b), x_min, dx, grid).sum()
    union = count_a + count_b - inter
    return float(inter / union) if union else 0.0


# ---------------------------------------------------------------------------
# AP and matching by brute force


def brute_force_ap(flags: Sequence[bool], num_gt: int, recall_points: int = 40) -> float:
    """Interpolated AP from exact fractions, trying every cut-off per recall point."""
    total = Fraction(0)
    for k in range(1, recall_points + 1):
        target = Fraction(k, recall_points)
        best = Fraction(0)
        for cut in range(1, len(flags) + 1):
            tp = sum(flags[:cut])
            if Fraction(tp, num_gt) >= target:
                best = max(best, Fraction(tp, cut))
        total += best
    return float(100 * total / recall_points)


def brute_force_match(
    gts: Sequence[Label3D],
    dets: Sequence[Detection],
    class_name: str,
    min_height: float,
    max_occlusion: int,
    max_truncation: float,
    iou_fn,
    threshold: float,
    neighbor: str | None,
) -> tuple[list[tuple[float, int, bool]], int]:
    """Score-ordered (score, index, is_tp) flags of one frame and its valid GT count."""

    def easy_enough(g: Label3D) -> bool:
        return (
            g.class_name != "DontCare"
            and g.bbox2d[3] - g.bbox2d[1] >= min_height
            and 0 <= g.occlusion <= max_occlusion
            and g.truncation <= max_truncation
        )

    def dontcare_share(d: Detection, region: tuple[float, float, float, float]) -> float:
        w = min(d.bbox2d[2], region[2]) - max(d.bbox2d[0], region[0])
        h = min(d.bbox2d[3], region[3]) - max(d.bbox2d[1], region[1])
        area = (d.bbox2d[2] - d.bbox2d[0]) * (d.bbox2d[3] - d.bbox2d[1])
        return max(w, 0.0) * max(h, 0.0) / area if area > 0 else 0.0

    valid = [j for j, g in enumerate(gts) if g.class_name == class_name and easy_enough(g)]
    iou = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if g.class_name != "DontCare":
                iou[i, j] = iou_fn(d, g)
    taken = [False] * len(gts)
    flags = []
    for i in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        d = dets[i]
        if d.class_name != class_name:
            continue
        if d.bbox2d[3] - d.bbox2d[1] < min_height:
            continue
        candidates = [j for j in valid if not taken[j] and iou[i, j] >= threshold]
        if candidates:
            best = max(candidates, key=lambda j: (iou[i, j], -j))
            taken[best] = True
            flags.append((d.score, i, True))
            continue
        blocked = any(
            iou[i, j] >= threshold
            for j, g in enumerate(gts)
            if (g.class_name == class_name and not easy_enough(g)) or g.class_name == neighbor
        )
        in_dontcare = any(dontcare_share(d, g.bbox2d) > 0.5 for g in gts if g.class_name == "DontCare")
        if not (blocked or in_dontcare):
            flags.append((d.score, i, False))
    return flags, len(valid)


SAMPLE_LABEL_LINE = (
    "Car 0.00 0 -1.57 599.41 156.40 629.75 189.25 2.85 2.63 12.34 0.47 1.49 69.44 -1.56"
)
SAMPLE_DETECTION_LINE = SAMPLE_LABEL_LINE + " 0.93"
SAMPLE_CALIB = """\
P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 721.5 0 609.6 44.9 0 721.5 172.9 0.2 0 0 1 0.003
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
"""
