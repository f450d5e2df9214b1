"""
KITTI-protocol 3D detection evaluation.

Per frame, detections are matched to ground truth for every class, difficulty
and IoU configuration, once with the 3D IoU and once with the bird's-eye-view
IoU. The score-ordered TP/FP flags of all frames are then pooled and reduced
to AP at 40 recall points. The spread of per-frame AP is reported alongside.
"""

import functools
import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.app_utils.config import worker_count
from app.app_utils.typing import RunManifest
from app.errors import (
    EmptyGT,
    FrameParseErrors,
    FrameSetMismatch,
    InsufficientData,
    Slam3dError,
)
from app.geometry import Box3DLike, bev_iou_of, box2d_overlap_fraction, iou_3d
from app.kitti_io import Detection, Label3D, read_detections, read_labels

EVAL_CLASSES = ("Car", "Pedestrian", "Cyclist")
DIFFICULTIES = ("Easy", "Moderate", "Hard")
IGNORED = "Ignored"
METRICS = ("3d", "bev")

IouFn = Callable[[Box3DLike, Box3DLike], float]

IOU_FUNCTIONS: Mapping[str, IouFn] = {"3d": iou_3d, "bev": bev_iou_of}


class DifficultyLevel(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_height_px: float = Field(ge=0)
    max_occlusion: int = Field(ge=0, le=3)
    max_truncation: float = Field(ge=0, le=1)


class EvalConfig(BaseModel):
    """Thresholds of the evaluation protocol."""

    model_config = ConfigDict(frozen=True)

    iou_configs: dict[str, dict[str, float]] = {
        "primary": {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5},
        "secondary": {"Car": 0.5, "Pedestrian": 0.3, "Cyclist": 0.3},
    }
    recall_points: Literal[40] = 40
    difficulties: dict[str, DifficultyLevel] = {
        "Easy": DifficultyLevel(min_height_px=40, max_occlusion=0, max_truncation=0.15),
        "Moderate": DifficultyLevel(min_height_px=25, max_occlusion=1, max_truncation=0.30),
        "Hard": DifficultyLevel(min_height_px=25, max_occlusion=2, max_truncation=0.50),
    }
    dontcare_overlap: float = Field(default=0.5, ge=0, le=1)
    neighbor_classes: dict[str, str] = {"Car": "Van", "Pedestrian": "Person_sitting"}

    @field_validator("iou_configs")
    @classmethod
    def _check_thresholds(cls, value: dict[str, dict[str, float]]) -> dict[str, dict[str, float]]:
        if not value:
            raise ValueError("at least one IoU configuration is required")
        for name, table in value.items():
            missing = set(EVAL_CLASSES) - set(table)
            if missing:
                raise ValueError(f"IoU config {name!r} has no threshold for {sorted(missing)}")
            for class_name, threshold in table.items():
                if not 0.0 < threshold <= 1.0:
                    raise ValueError(f"{name}/{class_name} threshold {threshold} outside (0, 1]")
        return value

    @model_validator(mode="after")
    def _check_difficulties(self) -> "EvalConfig":
        if tuple(self.difficulties) != DIFFICULTIES:
            raise ValueError(f"difficulties must be {DIFFICULTIES} in that order")
        return self

    def select(self, names: Sequence[str]) -> "EvalConfig":
        """Copy keeping only the named IoU configurations."""
        unknown = [n for n in names if n not in self.iou_configs]
        if unknown:
            raise KeyError(f"unknown IoU configuration(s) {unknown}")
        data = self.model_dump()
        data["iou_configs"] = {n: self.iou_configs[n] for n in names}
        return EvalConfig.model_validate(data)


DEFAULT_CONFIG = EvalConfig()


def _meets(g: Label3D, level: DifficultyLevel) -> bool:
    return (
        not g.is_dontcare
        and g.height_px >= level.min_height_px
        and 0 <= g.occlusion <= level.max_occlusion
        and g.truncation <= level.max_truncation
    )


def assign_difficulty(g: Label3D, cfg: EvalConfig = DEFAULT_CONFIG) -> str:
    """Easiest level whose thresholds ``g`` meets, else ``"Ignored"``."""
    for name, level in cfg.difficulties.items():
        if _meets(g, level):
            return name
    return IGNORED


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    ignored: int
    num_gt: int
    matched_ious: list[float] = field(default_factory=list)
    # (score, detection index, is_tp) in ranking order; ignored detections are left out.
    flags: list[tuple[float, int, bool]] = field(default_factory=list)


def match_detections(
    gts: Sequence[Label3D],
    dets: Sequence[Detection],
    class_name: str,
    difficulty: str,
    iou_fn: IouFn,
    threshold: float,
    cfg: EvalConfig = DEFAULT_CONFIG,
) -> MatchResult:
    """Greedy single-image matching under the PASCAL criterion.

    Detections are visited by descending score (ties by index). Each takes
    the unmatched valid ground truth of highest IoU >= ``threshold``. Those
    that match nothing are ignored when their 2D box is below the
    difficulty's minimum height, when they overlap a ground truth that is
    too hard for this difficulty or of the neighbor class, or when more than
    ``cfg.dontcare_overlap`` of their 2D box lies in a DontCare region.
    Everything else is a false positive.
    """
    level = cfg.difficulties[difficulty]
    neighbor = cfg.neighbor_classes.get(class_name)
    valid = [j for j, g in enumerate(gts) if g.class_name == class_name and _meets(g, level)]
    harder = [
        g
        for g in gts
        if (g.class_name == class_name and not _meets(g, level)) or g.class_name == neighbor
    ]
    dontcare = [g.bbox2d for g in gts if g.is_dontcare]

    order = sorted(
        (i for i, d in enumerate(dets) if d.class_name == class_name),
        key=lambda i: (-dets[i].score, i),
    )
    matched: set[int] = set()
    ious: list[float] = []
    flags: list[tuple[float, int, bool]] = []
    tp = fp = ignored = 0
    for i in order:
        d = dets[i]
        if d.height_px < level.min_height_px:
            ignored += 1
            continue
        best, best_iou = -1, -1.0
        for j in valid:
            if j in matched:
                continue
            iou = iou_fn(d, gts[j])
            if iou >= threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched.add(best)
            ious.append(best_iou)
            flags.append((d.score, i, True))
            tp += 1
        elif any(iou_fn(d, g) >= threshold for g in harder) or any(
            box2d_overlap_fraction(d.bbox2d, region) > cfg.dontcare_overlap for region in dontcare
        ):
            ignored += 1
        else:
            flags.append((d.score, i, False))
            fp += 1
    return MatchResult(
        tp=tp, fp=fp, ignored=ignored, num_gt=len(valid), matched_ious=ious, flags=flags
    )


@dataclass(frozen=True)
class APResult:
    ap: float  # percent
    pr_curve: list[tuple[float, float]]  # (recall, interpolated precision) per recall point


def ap_r40(flags: Sequence[bool], num_gt: int, recall_points: int = 40) -> APResult:
    """AP over the recall points k/R, k = 1..R, from a score-ordered TP/FP ranking.

    The interpolated precision at recall r is the best precision reached at
    any cut-off whose recall is at least r, or 0 when r is never reached.
    """
    if num_gt <= 0:
        raise EmptyGT("AP is undefined without ground truth")
    hits = np.asarray(flags, dtype=bool)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1) if hits.size else np.zeros(0)
    best_after = np.maximum.accumulate(precision[::-1])[::-1] if hits.size else precision

    curve = []
    for k in range(1, recall_points + 1):
        # Integer form of tp / num_gt >= k / recall_points.
        reached = np.nonzero(tp * recall_points >= k * num_gt)[0]
        p = float(best_after[reached[0]]) if reached.size else 0.0
        curve.append((k / recall_points, p))
    ap = 100.0 * sum(p for _, p in curve) / recall_points
    return APResult(ap=ap, pr_curve=curve)


def prediction_variance(per_image_aps: Sequence[float]) -> float:
    """Sample variance (n - 1 denominator) of per-image AP values."""
    values = sorted(float(v) for v in per_image_aps)
    if len(values) < 2:
        raise InsufficientData(f"variance needs at least 2 images, got {len(values)}")
    return float(np.var(values, ddof=1))


# ---------------------------------------------------------------------------
# Reports


class Counts(BaseModel):
    gt: int = 0
    tp: int = 0
    fp: int = 0
    ignored: int = 0


class EvalCell(BaseModel):
    """One (method, class, difficulty, IoU config) cell; absent APs are None."""

    method: str
    class_name: str
    difficulty: str
    iou_config: str
    ap3d: float | None
    ap_bev: float | None
    sigma3d: float | None
    pr_curve_3d: list[tuple[float, float]] = []
    pr_curve_bev: list[tuple[float, float]] = []
    counts_3d: Counts = Counts()
    counts_bev: Counts = Counts()


class EvalReport(BaseModel):
    methods: list[str]
    iou_configs: list[str]
    classes: list[str] = list(EVAL_CLASSES)
    difficulties: list[str] = list(DIFFICULTIES)
    frame_count: int
    cells: list[EvalCell]
    manifest: RunManifest | None = None

    def cell(self, method: str, class_name: str, difficulty: str, iou_config: str) -> EvalCell:
        for c in self.cells:
            if (c.method, c.class_name, c.difficulty, c.iou_config) == (
                method,
                class_name,
                difficulty,
                iou_config,
            ):
                return c
        raise KeyError(f"no cell {method}/{class_name}/{difficulty}/{iou_config}")


# ---------------------------------------------------------------------------
# Directory evaluation

RecordT = TypeVar("RecordT")
CellKey = tuple[str, str, str, str]  # class, difficulty, IoU config, metric


def _frames_in(directory: Path) -> list[str]:
    return sorted(p.stem for p in directory.glob("*.txt"))


def _read_frames(
    directory: Path, frames: Sequence[str], reader: Callable[[Path], list[RecordT]]
) -> tuple[dict[str, list[RecordT]], list[tuple[str, Exception]]]:
    def attempt(frame: str) -> list[RecordT] | Exception:
        try:
            return reader(directory / f"{frame}.txt")
        except (Slam3dError, ValueError, OSError) as e:
            return e

    records: dict[str, list[RecordT]] = {}
    failures: list[tuple[str, Exception]] = []
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for frame, outcome in zip(frames, pool.map(attempt, frames), strict=True):
            if isinstance(outcome, Exception):
                failures.append((frame, outcome))
            else:
                records[frame] = outcome
    return records, failures


def _match_frame(
    gts: Sequence[Label3D], dets: Sequence[Detection], cfg: EvalConfig
) -> dict[CellKey, MatchResult]:
    cached = {metric: functools.cache(fn) for metric, fn in IOU_FUNCTIONS.items()}
    results: dict[CellKey, MatchResult] = {}
    for class_name in EVAL_CLASSES:
        for difficulty in DIFFICULTIES:
            for config_name, thresholds in cfg.iou_configs.items():
                for metric in METRICS:
                    results[(class_name, difficulty, config_name, metric)] = match_detections(
                        gts, dets, class_name, difficulty, cached[metric], thresholds[class_name], cfg
                    )
    return results


def _reduce(
    frames: Sequence[str], per_frame: Sequence[dict[CellKey, MatchResult]], key: CellKey, cfg: EvalConfig
) -> tuple[APResult | None, Counts, list[float]]:
    """Pooled AP, summed counts and the per-frame APs of frames with ground truth."""
    ranked = sorted(
        (-score, frame, index, is_tp)
        for frame, results in zip(frames, per_frame, strict=True)
        for score, index, is_tp in results[key].flags
    )
    counts = Counts()
    frame_aps: list[float] = []
    for results in per_frame:
        r = results[key]
        counts.gt += r.num_gt
        counts.tp += r.tp
        counts.fp += r.fp
        counts.ignored += r.ignored
        if r.num_gt:
            frame_aps.append(ap_r40([f for _, _, f in r.flags], r.num_gt, cfg.recall_points).ap)
    try:
        pooled: APResult | None = ap_r40([r[3] for r in ranked], counts.gt, cfg.recall_points)
    except EmptyGT:
        pooled = None
    return pooled, counts, frame_aps


def _evaluate_method(
    method: str,
    frames: Sequence[str],
    labels: Mapping[str, list[Label3D]],
    detections: Mapping[str, list[Detection]],
    cfg: EvalConfig,
) -> list[EvalCell]:
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        per_frame = list(
            pool.map(lambda f: _match_frame(labels[f], detections.get(f, []), cfg), frames)
        )

    cells = []
    for class_name in EVAL_CLASSES:
        for difficulty in DIFFICULTIES:
            for config_name in cfg.iou_configs:
                res_3d, counts_3d, frame_aps = _reduce(
                    frames, per_frame, (class_name, difficulty, config_name, "3d"), cfg
                )
                res_bev, counts_bev, _ = _reduce(
                    frames, per_frame, (class_name, difficulty, config_name, "bev"), cfg
                )
                try:
                    sigma: float | None = prediction_variance(frame_aps)
                except InsufficientData:
                    sigma = None
                cells.append(
                    EvalCell(
                        method=method,
                        class_name=class_name,
                        difficulty=difficulty,
                        iou_config=config_name,
                        ap3d=res_3d.ap if res_3d else None,
                        ap_bev=res_bev.ap if res_bev else None,
                        sigma3d=sigma,
                        pr_curve_3d=res_3d.pr_curve if res_3d else [],
                        pr_curve_bev=res_bev.pr_curve if res_bev else [],
                        counts_3d=counts_3d,
                        counts_bev=counts_bev,
                    )
                )
    return cells


def label_dir(gt_dir: Path) -> Path:
    """KITTI layout keeps labels under ``label_2/``; a flat directory works too."""
    nested = Path(gt_dir) / "label_2"
    return nested if nested.is_dir() else Path(gt_dir)


def evaluate(
    gt_dir: Path,
    det_dir: Path | Sequence[Path],
    cfg: EvalConfig = DEFAULT_CONFIG,
    methods: Sequence[str] | None = None,
) -> EvalReport:
    """Evaluate one or more detection directories against the same labels.

    A detection directory without any result file stands for a detector that
    found nothing. Otherwise its frame set must equal the label frame set.
    Parse failures of all files are collected before raising.
    """
    det_dirs = [Path(det_dir)] if isinstance(det_dir, str | Path) else [Path(d) for d in det_dir]
    names = list(methods) if methods else [d.name for d in det_dirs]
    if len(names) != len(det_dirs):
        raise ValueError(f"{len(det_dirs)} detection directories but {len(names)} method names")

    labels_path = label_dir(gt_dir)
    frames = _frames_in(labels_path)
    labels, failures = _read_frames(labels_path, frames, read_labels)

    all_detections: list[dict[str, list[Detection]]] = []
    for method, directory in zip(names, det_dirs, strict=True):
        det_frames = _frames_in(directory)
        if not det_frames:
            logging.warning(f"No result files in {directory}; treating {method} as empty")
            all_detections.append({})
            continue
        if det_frames != frames:
            raise FrameSetMismatch(
                missing_detections=sorted(set(frames) - set(det_frames)),
                missing_labels=sorted(set(det_frames) - set(frames)),
            )
        detections, det_failures = _read_frames(directory, frames, read_detections)
        failures.extend(det_failures)
        all_detections.append(detections)
    if failures:
        raise FrameParseErrors(sorted(failures, key=lambda f: f[0]))

    cells: list[EvalCell] = []
    for method, detections in zip(names, all_detections, strict=True):
        logging.info(f"Evaluating {method} on {len(frames)} frame(s)")
        cells.extend(_evaluate_method(method, frames, labels, detections, cfg))
    return EvalReport(
        methods=names,
        iou_configs=list(cfg.iou_configs),
        frame_count=len(frames),
        cells=cells,
    )
