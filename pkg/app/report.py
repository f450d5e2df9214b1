"""Text, CSV and JSON renderings of an ``EvalReport``."""

import csv
import io
import logging
from pathlib import Path

from app.app_utils.files import atomic_write_text
from app.eval3d import EvalCell, EvalReport

METRIC_TITLES = {
    "ap3d": "AP_3D (R40)",
    "ap_bev": "AP_BEV (R40)",
    "sigma3d": "sigma_3D (variance of per-frame AP_3D)",
}
SHORT_DIFFICULTY = {"Easy": "Easy", "Moderate": "Mod.", "Hard": "Hard"}
ABSENT = "-"
CSV_COLUMNS = ("method", "class", "difficulty", "iou_config", "metric", "value")


def _value(cell: EvalCell, metric: str) -> float | None:
    return getattr(cell, metric)


def render_table(report: EvalReport, metric: str) -> str:
    """One aligned table: rows method x class, columns Easy/Mod./Hard per IoU config."""
    header = ["Method", "Class"]
    for config in report.iou_configs:
        header.extend(f"{config} {SHORT_DIFFICULTY.get(d, d)}" for d in report.difficulties)
    rows = [header]
    for method in report.methods:
        for class_name in report.classes:
            row = [method, class_name]
            for config in report.iou_configs:
                for difficulty in report.difficulties:
                    value = _value(report.cell(method, class_name, difficulty, config), metric)
                    row.append(ABSENT if value is None else f"{value:.2f}")
            rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [METRIC_TITLES[metric]]
    for n, row in enumerate(rows):
        cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
        cells.extend(v.rjust(w) for v, w in zip(row[2:], widths[2:], strict=True))
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines) + "\n"


def render_text(report: EvalReport) -> str:
    parts = [f"{report.frame_count} frame(s), methods: {', '.join(report.methods)}\n"]
    parts.extend(render_table(report, metric) for metric in METRIC_TITLES)
    return "\n".join(parts)


def render_csv(report: EvalReport) -> str:
    """Long format, one metric value per row; absent values are empty."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cell in report.cells:
        for metric in METRIC_TITLES:
            value = _value(cell, metric)
            writer.writerow(
                [
                    cell.method,
                    cell.class_name,
                    cell.difficulty,
                    cell.iou_config,
                    metric,
                    "" if value is None else f"{value:.6f}",
                ]
            )
    return buffer.getvalue()


def render_json(report: EvalReport) -> str:
    return report.model_dump_json(indent=2) + "\n"


def write_reports(report: EvalReport, out: Path) -> list[Path]:
    """Write ``out`` (JSON) plus ``.csv`` and ``.txt`` siblings with the same stem."""
    out = Path(out)
    targets = {
        out: render_json(report),
        out.with_suffix(".csv"): render_csv(report),
        out.with_suffix(".txt"): render_text(report),
    }
    for path, text in targets.items():
        atomic_write_text(path, text)
    logging.info(f"Reports written to {', '.join(str(p) for p in targets)}")
    return list(targets)
