"""
KITTI 3D object detection text formats.

Label files carry 15 whitespace-separated fields per object, result files the
same 15 plus a trailing confidence score, and calibration files one
``KEY: v1 v2 ...`` matrix per line. Records are parsed strictly: wrong arity,
unparseable or non-finite numbers and geometric invariant violations raise.
"""

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import TypeVar

import numpy as np

from app.errors import (
    FieldCountError,
    KittiFormatError,
    MissingKeyError,
    NumericError,
    RangeError,
    UnknownClassError,
)
from app.geometry import BevBox, bev_box_of

KITTI_CLASSES = (
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Cyclist",
    "Tram",
    "Misc",
    "DontCare",
)

LABEL_FIELDS = 15
DETECTION_FIELDS = 16

# Six-decimal output of +/-pi lands just outside [-pi, pi].
_ANGLE_LIMIT = math.pi + 1e-6

RecordT = TypeVar("RecordT", bound="Label3D")


@dataclass(frozen=True)
class Label3D:
    """One KITTI ground-truth object."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]  # left, top, right, bottom
    dims3d: tuple[float, float, float]  # height, width, length
    location: tuple[float, float, float]  # x, y, z (bottom center, camera frame)
    rotation_y: float

    def __post_init__(self) -> None:
        _validate(self, allow_unset=False)

    @property
    def is_dontcare(self) -> bool:
        return self.class_name == "DontCare"

    @property
    def height_px(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def bev_box(self) -> BevBox:
        return bev_box_of(self)

    def box_corners(self) -> np.ndarray:
        """The 8 corners of the 3D box in the camera frame, shape (8, 3).

        The first four corners are on the bottom face, the last four on top.
        """
        height, width, length = self.dims3d
        x = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=float) * (length / 2)
        y = np.array([0, 0, 0, 0, -1, -1, -1, -1], dtype=float) * height
        z = np.array([1, -1, -1, 1, 1, -1, -1, 1], dtype=float) * (width / 2)
        c, s = math.cos(self.rotation_y), math.sin(self.rotation_y)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return (rot @ np.stack([x, y, z])).T + np.asarray(self.location)


@dataclass(frozen=True)
class Detection(Label3D):
    """A label record plus the detector's confidence."""

    score: float

    def __post_init__(self) -> None:
        _validate(self, allow_unset=True)
        if not math.isfinite(self.score):
            raise NumericError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class Calib:
    """Camera-2 projection plus every other matrix found in the file."""

    p2: tuple[tuple[float, ...], ...]
    entries: dict[str, tuple[float, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if len(self.p2) != 3 or any(len(row) != 4 for row in self.p2):
            raise NumericError("P2 must be a 3x4 matrix")
        if not all(math.isfinite(v) for row in self.p2 for v in row):
            raise NumericError("P2 contains non-finite values")
        if not (self.p2[0][0] > 0 and self.p2[1][1] > 0):
            raise RangeError(
                f"P2 focal lengths must be positive, got {self.p2[0][0]}, {self.p2[1][1]}"
            )

    @property
    def p2_matrix(self) -> np.ndarray:
        return np.array(self.p2, dtype=np.float64)

    def project_rect_to_image(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 3) rectified camera points to (N, 2) pixel coordinates."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        hom = np.hstack([pts, np.ones((pts.shape[0], 1))])
        uvw = hom @ self.p2_matrix.T
        return uvw[:, :2] / uvw[:, 2:3]


def _validate(label: Label3D, allow_unset: bool) -> None:
    if label.class_name not in KITTI_CLASSES:
        raise UnknownClassError(f"unknown class name {label.class_name!r}")
    left, top, right, bottom = label.bbox2d
    if right < left or bottom < top:
        raise RangeError(f"degenerate 2D box {label.bbox2d}")
    if label.class_name == "DontCare":
        return

    unset = allow_unset and label.truncation == -1 and label.occlusion == -1
    if not unset:
        if not 0.0 <= label.truncation <= 1.0:
            raise RangeError(f"truncation {label.truncation} outside [0, 1]")
        if label.occlusion not in (0, 1, 2, 3):
            raise RangeError(f"occlusion {label.occlusion} not in 0..3")
    if not all(d > 0 for d in label.dims3d):
        raise RangeError(f"3D dimensions must be positive, got {label.dims3d}")
    for name, angle in (("alpha", label.alpha), ("rotation_y", label.rotation_y)):
        if abs(angle) > _ANGLE_LIMIT:
            raise RangeError(f"{name} {angle} outside [-pi, pi]")


def _to_float(token: str, name: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise NumericError(f"{name}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value):
        raise NumericError(f"{name}: value {token!r} is not finite")
    return value


def _to_int(token: str, name: str) -> int:
    value = _to_float(token, name)
    if value != int(value):
        raise NumericError(f"{name}: expected an integer, got {token!r}")
    return int(value)


def _label_kwargs(tokens: list[str]) -> dict:
    return {
        "class_name": tokens[0],
        "truncation": _to_float(tokens[1], "truncation"),
        "occlusion": _to_int(tokens[2], "occlusion"),
        "alpha": _to_float(tokens[3], "alpha"),
        "bbox2d": tuple(_to_float(t, "bbox2d") for t in tokens[4:8]),
        "dims3d": tuple(_to_float(t, "dims3d") for t in tokens[8:11]),
        "location": tuple(_to_float(t, "location") for t in tokens[11:14]),
        "rotation_y": _to_float(tokens[14], "rotation_y"),
    }


def parse_label_line(line: str) -> Label3D:
    tokens = line.split()
    if len(tokens) != LABEL_FIELDS:
        raise FieldCountError(f"label lines have {LABEL_FIELDS} fields, got {len(tokens)}")
    return Label3D(**_label_kwargs(tokens))


def parse_detection_line(line: str) -> Detection:
    tokens = line.split()
    if len(tokens) != DETECTION_FIELDS:
        raise FieldCountError(
            f"detection lines have {DETECTION_FIELDS} fields, got {len(tokens)}"
        )
    return Detection(**_label_kwargs(tokens[:LABEL_FIELDS]), score=_to_float(tokens[15], "score"))


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _label_tokens(label: Label3D) -> list[str]:
    return [
        label.class_name,
        _fmt(label.truncation),
        str(int(label.occlusion)),
        _fmt(label.alpha),
        *(_fmt(v) for v in label.bbox2d),
        *(_fmt(v) for v in label.dims3d),
        *(_fmt(v) for v in label.location),
        _fmt(label.rotation_y),
    ]


def format_label(label: Label3D) -> str:
    return " ".join(_label_tokens(label)) + "\n"


def format_detection(d: Detection) -> str:
    return " ".join([*_label_tokens(d), _fmt(d.score)]) + "\n"


def _parse_lines(text: str, parser: Callable[[str], RecordT]) -> list[RecordT]:
    records: list[RecordT] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(parser(line))
        except (KittiFormatError, UnknownClassError) as e:
            raise type(e)(f"line {lineno}: {e}") from None
    return records


def parse_label_file(text: str) -> list[Label3D]:
    return _parse_lines(text, parse_label_line)


def parse_detection_file(text: str) -> list[Detection]:
    return _parse_lines(text, parse_detection_line)


def read_labels(path: Path) -> list[Label3D]:
    return parse_label_file(Path(path).read_text(encoding="ascii"))


def read_detections(path: Path) -> list[Detection]:
    return parse_detection_file(Path(path).read_text(encoding="ascii"))


def format_labels(labels: Iterable[Label3D]) -> str:
    return "".join(format_label(label) for label in labels)


def format_detections(dets: Iterable[Detection]) -> str:
    return "".join(format_detection(d) for d in dets)


def parse_calib(text_block: str) -> Calib:
    entries: dict[str, tuple[float, ...]] = {}
    for lineno, line in enumerate(text_block.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep or not key.strip():
            raise KittiFormatError(f"line {lineno}: expected 'KEY: values', got {line!r}")
        entries[key.strip()] = tuple(_to_float(t, key.strip()) for t in rest.split())

    if "P2" not in entries:
        raise MissingKeyError("calibration block has no P2 line")
    values = entries["P2"]
    if len(values) != 12:
        raise NumericError(f"P2 needs 12 values, got {len(values)}")
    p2 = tuple(tuple(values[r * 4 : r * 4 + 4]) for r in range(3))
    return Calib(p2=p2, entries=entries)


def format_calib(calib: Calib) -> str:
    entries = dict(calib.entries)
    # Keeps the position of an existing P2 line, appends otherwise.
    entries["P2"] = tuple(v for row in calib.p2 for v in row)
    lines = [f"{key}: " + " ".join(f"{v:.12e}" for v in values) for key, values in entries.items()]
    return "\n".join(lines) + "\n"
