"""
Class-wise grayscale semantic prior maps.

Instance masks from any segmentation source (a segmentation network or
rasterized ground truth) are flattened into one 8-bit image per frame in
which every category has its own gray level. Overlaps are resolved by a fixed
class priority, never by mask order.
"""

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.errors import DimensionMismatch, FormatError, UnknownClassError
from app.netpbm import Sink, Source, read_graymap, write_graymap
from app.tensor_core import Tensor

PRIOR_CLASSES = ("Car", "Pedestrian", "Cyclist")

DEFAULT_INTENSITIES: Mapping[str, int] = {"Car": 85, "Pedestrian": 170, "Cyclist": 255}

# Lowest priority first; later classes overwrite earlier ones where masks overlap.
PAINT_ORDER = ("Car", "Pedestrian", "Cyclist")


@dataclass(frozen=True)
class InstanceMask:
    class_name: str
    mask: np.ndarray  # (height, width) bool
    source: str = ""

    def __post_init__(self) -> None:
        if self.class_name not in PRIOR_CLASSES:
            raise UnknownClassError(
                f"prior maps encode {', '.join(PRIOR_CLASSES)}; got {self.class_name!r}"
            )
        mask = np.asarray(self.mask).astype(bool)
        if mask.ndim != 2:
            raise DimensionMismatch(f"masks are 2D, got shape {mask.shape}")
        object.__setattr__(self, "mask", mask)

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)"""
        return (self.mask.shape[1], self.mask.shape[0])


@dataclass(frozen=True)
class GrayPriorMap:
    pixels: np.ndarray  # (height, width) uint8
    intensity_table: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.dtype != np.uint8:
            raise FormatError(f"prior maps are 2D uint8, got {pixels.dtype} {pixels.shape}")
        allowed = np.array(sorted({0, *self.intensity_table.values()}), dtype=np.uint8)
        if not np.all(np.isin(pixels, allowed)):
            stray = sorted(set(np.unique(pixels).tolist()) - set(allowed.tolist()))
            raise FormatError(f"pixel values {stray} are not in the intensity table")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GrayPriorMap):
            return NotImplemented
        return bool(np.array_equal(self.pixels, other.pixels)) and dict(
            self.intensity_table
        ) == dict(other.intensity_table)

    __hash__ = None  # type: ignore[assignment]


def validate_intensity_table(table: Mapping[str, int]) -> dict[str, int]:
    unknown = set(table) - set(PRIOR_CLASSES)
    if unknown:
        raise UnknownClassError(f"intensity table has unknown classes {sorted(unknown)}")
    missing = set(PRIOR_CLASSES) - set(table)
    if missing:
        raise FormatError(f"intensity table is missing {sorted(missing)}")
    values = list(table.values())
    if any(not 1 <= v <= 255 for v in values) or len(set(values)) != len(values):
        raise FormatError(f"intensities must be distinct values in 1..255, got {values}")
    return {name: int(table[name]) for name in PRIOR_CLASSES}


def read_intensity_table(text: str) -> dict[str, int]:
    """Parse ``<class> <gray>`` lines (``#`` starts a comment)."""
    table: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected '<class> <gray>', got {raw!r}")
        try:
            table[parts[0]] = int(parts[1])
        except ValueError:
            raise FormatError(f"line {lineno}: gray value {parts[1]!r} is not an integer") from None
    return validate_intensity_table(table)


def encode_semantic_map(
    masks: Iterable[InstanceMask],
    width: int,
    height: int,
    intensity_table: Mapping[str, int] = DEFAULT_INTENSITIES,
) -> GrayPriorMap:
    """Flatten instance masks into one gray level per class.

    Background is 0. A pixel covered by several classes takes the intensity
    of the highest-priority class (Cyclist > Pedestrian > Car); masks of the
    same class are united.
    """
    table = validate_intensity_table(intensity_table)
    union = {name: np.zeros((height, width), dtype=bool) for name in PRIOR_CLASSES}
    for m in masks:
        if m.size != (width, height):
            raise DimensionMismatch(
                f"{m.class_name} mask from {m.source or 'unknown source'} is "
                f"{m.size[0]}x{m.size[1]}, image is {width}x{height}"
            )
        union[m.class_name] |= m.mask

    pixels = np.zeros((height, width), dtype=np.uint8)
    for name in PAINT_ORDER:
        pixels[union[name]] = table[name]
    return GrayPriorMap(pixels=pixels, intensity_table=table)


def write_pgm(prior: GrayPriorMap, sink: Sink) -> None:
    write_graymap(prior.pixels, sink)


def read_pgm(source: Source, intensity_table: Mapping[str, int] = DEFAULT_INTENSITIES) -> GrayPriorMap:
    return GrayPriorMap(pixels=read_graymap(source), intensity_table=dict(intensity_table))


def map_to_tensor(prior: GrayPriorMap) -> Tensor:
    """1 x 1 x H x W tensor with values ``pixel / 255``."""
    return Tensor(prior.pixels.astype(np.float64)[None, None] / 255.0)


# ---------------------------------------------------------------------------
# Mask manifests


@dataclass(frozen=True)
class FrameMasks:
    frame_id: str
    masks: list[InstanceMask]
    size: tuple[int, int] | None  # (width, height), None when unknown


def load_frame_masks(manifest: Path) -> FrameMasks:
    """Read one frame's manifest: ``<class> <mask-file> [source]`` per instance.

    Mask paths are relative to the manifest's directory. A ``size <w> <h>``
    line fixes the frame size, which frames without instances need.
    """
    manifest = Path(manifest)
    masks: list[InstanceMask] = []
    size: tuple[int, int] | None = None
    try:
        text = manifest.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{manifest.name}: not UTF-8 text ({e.reason} at byte {e.start})") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "size":
            if len(parts) != 3:
                raise FormatError(f"{manifest.name}:{lineno}: expected 'size <width> <height>'")
            try:
                size = (int(parts[1]), int(parts[2]))
            except ValueError:
                raise FormatError(f"{manifest.name}:{lineno}: non-integer size") from None
            continue
        if len(parts) not in (2, 3):
            raise FormatError(
                f"{manifest.name}:{lineno}: expected '<class> <mask-file> [source]', got {raw!r}"
            )
        class_name, mask_file = parts[0], parts[1]
        source = parts[2] if len(parts) == 3 else ""
        pixels = read_graymap(manifest.parent / mask_file)
        masks.append(InstanceMask(class_name=class_name, mask=pixels > 0, source=source))

    if size is None and masks:
        size = masks[0].size
    return FrameMasks(frame_id=manifest.stem, masks=masks, size=size)


def encode_frame(frame: FrameMasks, intensity_table: Mapping[str, int] = DEFAULT_INTENSITIES) -> GrayPriorMap:
    if frame.size is None:
        raise DimensionMismatch(f"frame {frame.frame_id} has no instances and no size line")
    width, height = frame.size
    prior = encode_semantic_map(frame.masks, width, height, intensity_table)
    logging.debug(f"Encoded frame {frame.frame_id}: {len(frame.masks)} instance(s), {width}x{height}")
    return prior
