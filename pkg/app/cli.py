import io
import logging
import time
from collections.abc import Sequence
from pathlib import Path

import click

from app.app_utils.config import build_manifest, write_run_manifest
from app.app_utils.files import atomic_write_bytes, atomic_write_text
from app.errors import FormatError, FrameParseErrors, Slam3dError
from app.eval3d import DEFAULT_CONFIG, evaluate
from app.fusion_pipeline import FusionConfig, run_pipeline
from app.gradcheck import CHECKS, TOLERANCE, run_checks
from app.netpbm import read_ppm
from app.paired_transform import apply, sample_transform
from app.prior_map import (
    DEFAULT_INTENSITIES,
    encode_frame,
    load_frame_masks,
    map_to_tensor,
    read_intensity_table,
    read_pgm,
    write_pgm,
)
from app.report import render_table, write_reports
from app.tensor_core import Tensor

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_DATA_ERROR = 2
EXIT_USAGE = 64

_existing_dir = click.Path(exists=True, file_okay=False, path_type=Path)
_existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _intensities(path: Path | None) -> dict[str, int]:
    if path is None:
        return dict(DEFAULT_INTENSITIES)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path.name}: intensity table is not UTF-8 text") from None
    return read_intensity_table(text)


def load_image(path: Path) -> Tensor:
    """1x3xHxW tensor from a binary PPM (scaled to [0, 1]) or a tensor snapshot."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        pixels = read_ppm(data)
        return Tensor(pixels.transpose(2, 0, 1)[None].astype("float64") / 255.0)
    return Tensor.from_bytes(data)


@click.group()
@click.option("--verbose", is_flag=True, help="Log at DEBUG level, including stage spans")
def cli(verbose: bool) -> None:
    """Segmentation-prior fusion and KITTI 3D evaluation tools."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level)
    logging.getLogger().setLevel(level)


@cli.command("encode-priors")
@click.option("--masks", "masks_dir", type=_existing_dir, required=True, help="Directory of <frame>.txt mask manifests")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory for <frame>.pgm")
@click.option("--intensity-table", type=_existing_file, default=None, help="File of '<class> <gray>' lines")
def encode_priors(masks_dir: Path, out_dir: Path, intensity_table: Path | None) -> int:
    """Encode per-frame instance masks into grayscale prior maps."""
    start = time.perf_counter()
    table = _intensities(intensity_table)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifests = sorted(masks_dir.glob("*.txt"))
    if not manifests:
        logging.warning(f"No mask manifests found in {masks_dir}")

    written: list[Path] = []
    failures: list[tuple[str, Exception]] = []
    for manifest in manifests:
        try:
            frame = load_frame_masks(manifest)
            if not frame.masks and frame.size is None:
                logging.warning(f"Skipping frame {frame.frame_id}: empty manifest without a size line")
                continue
            prior = encode_frame(frame, table)
        except (Slam3dError, OSError) as e:
            failures.append((manifest.stem, e))
            continue
        buffer = io.BytesIO()
        write_pgm(prior, buffer)
        target = out_dir / f"{frame.frame_id}.pgm"
        atomic_write_bytes(target, buffer.getvalue())
        written.append(target)
    if failures:
        raise FrameParseErrors(failures)

    flags = {"masks": str(masks_dir), "out": str(out_dir), "intensity_table": table}
    manifest_out = build_manifest("encode-priors", flags, [str(m) for m in manifests], _elapsed_ms(start))
    write_run_manifest(manifest_out, _sidecar(out_dir, ".manifest.json"))
    click.echo(f"Encoded {len(written)} prior map(s) into {out_dir}")
    return EXIT_OK


@cli.command("fuse")
@click.option("--image", type=_existing_file, required=True, help="Binary PPM or tensor snapshot")
@click.option("--prior", type=_existing_file, required=True, help="Prior map (binary PGM)")
@click.option("--strategy", type=click.Choice(["multiply", "concat", "attention"]), default="multiply", show_default=True)
@click.option("--point", type=click.Choice(["after_dla", "during_dla", "heads_only"]), default="after_dla", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--augment", is_flag=True, help="Sample a random flip and crop from --seed")
@click.option("--intensity-table", type=_existing_file, default=None, help="Table the prior was encoded with")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="3D-head tensor snapshot")
def fuse_command(
    image: Path,
    prior: Path,
    strategy: str,
    point: str,
    seed: int,
    augment: bool,
    intensity_table: Path | None,
    out: Path,
) -> int:
    """Run the fusion pipeline on one aligned image/prior pair."""
    start = time.perf_counter()
    image_t = load_image(image)
    prior_t = map_to_tensor(read_pgm(prior, _intensities(intensity_table)))
    spec = sample_transform(seed, augment, image_t.spatial)
    image_t, prior_t = apply(image_t, prior_t, spec)

    cfg = FusionConfig.model_validate({"strategy": strategy, "point": point, "seed": seed})
    result = run_pipeline(image_t, prior_t, cfg)

    atomic_write_bytes(out, result.head_3d.to_bytes())
    atomic_write_text(_sidecar(out, ".timing.json"), result.timing.model_dump_json(indent=2) + "\n")
    flags = {**cfg.model_dump(), "augment": augment, "image": str(image), "prior": str(prior)}
    manifest = build_manifest("fuse", flags, [str(image), str(prior)], _elapsed_ms(start), seed=seed)
    write_run_manifest(manifest, _sidecar(out, ".manifest.json"))
    click.echo(
        f"{strategy}/{point}: {result.fuse_calls} fuse call(s), 3D head {result.head_3d.shape}, "
        f"{result.timing.total_ms:.1f} ms"
    )
    return EXIT_OK


@cli.command("eval")
@click.option("--gt", "gt_dir", type=_existing_dir, required=True, help="KITTI label directory (or its parent)")
@click.option("--det", "det_dirs", type=_existing_dir, multiple=True, required=True, help="Result directory; repeat per method")
@click.option("--method", "methods", multiple=True, help="Method name per --det, in order")
@click.option("--iou-config", type=click.Choice(["both", "primary", "secondary"]), default="both", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="report.json; .csv and .txt are written beside it")
def eval_command(
    gt_dir: Path, det_dirs: tuple[Path, ...], methods: tuple[str, ...], iou_config: str, out: Path
) -> int:
    """Evaluate detection results with the KITTI 3D protocol."""
    start = time.perf_counter()
    if methods and len(methods) != len(det_dirs):
        raise click.UsageError(f"{len(det_dirs)} --det given but {len(methods)} --method")
    cfg = DEFAULT_CONFIG if iou_config == "both" else DEFAULT_CONFIG.select([iou_config])

    report = evaluate(gt_dir, list(det_dirs), cfg, list(methods) or None)
    flags = {
        "gt": str(gt_dir),
        "det": [str(d) for d in det_dirs],
        "method": report.methods,
        "iou_config": iou_config,
    }
    manifest = build_manifest("eval", flags, [str(gt_dir), *map(str, det_dirs)], _elapsed_ms(start))
    report = report.model_copy(update={"manifest": manifest})
    write_reports(report, out)
    click.echo(render_table(report, "ap3d"))
    return EXIT_OK


@cli.command("gradcheck")
@click.option("--trials", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--corrupt", type=click.Choice(list(CHECKS)), default=None, hidden=True)
def gradcheck_command(trials: int, seed: int, corrupt: str | None) -> int:
    """Compare analytic gradients against central differences."""
    start = time.perf_counter()
    results = run_checks(trials, seed, corrupt)
    failed = []
    for name, error in results.items():
        ok = error < TOLERANCE
        if not ok:
            failed.append(name)
        click.echo(f"{name:<20} {error:.3e}  {'ok' if ok else 'FAIL'}")

    flags = {"trials": trials, "seed": seed, "corrupt": corrupt}
    manifest = build_manifest("gradcheck", flags, [], _elapsed_ms(start), seed=seed)
    logging.info(f"Run manifest: {manifest.model_dump_json()}")
    if failed:
        click.echo(f"{len(failed)} check(s) at or above {TOLERANCE:g}: {', '.join(failed)}", err=True)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Console entry point; maps failures onto exit codes."""
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="slam3d", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except (Slam3dError, OSError) as e:
        logging.error(f"{type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return EXIT_DATA_ERROR
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
