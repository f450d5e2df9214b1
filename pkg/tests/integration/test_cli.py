import csv
import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np
import pytest

from app.cli import EXIT_CHECK_FAILED, EXIT_DATA_ERROR, EXIT_OK, EXIT_USAGE, load_image, main
from app.fusion_pipeline import FusionConfig, run_pipeline
from app.kitti_io import Label3D
from app.netpbm import encode_pgm, encode_ppm
from app.paired_transform import apply, sample_transform
from app.prior_map import map_to_tensor, read_pgm
from app.tensor_core import Tensor
from tests.helpers import as_detection, write_detection_dir, write_label_dir

GOLDEN_FILE = Path(__file__).parent.parent / "data" / "fuse_golden.json"
GOLDEN_KEY = "multiply/after_dla/seed0"


def _write_mask(path: Path, mask: np.ndarray) -> None:
    path.write_bytes(encode_pgm(mask.astype(np.uint8) * 255))


@pytest.fixture
def masks_dir(tmp_path: Path) -> Path:
    """Two frames of instance masks: overlapping Car/Pedestrian, and an empty frame."""
    root = tmp_path / "masks"
    root.mkdir()
    car = np.zeros((6, 8), dtype=bool)
    car[1:5, 1:6] = True
    pedestrian = np.zeros((6, 8), dtype=bool)
    pedestrian[3:6, 4:8] = True
    _write_mask(root / "car.pgm", car)
    _write_mask(root / "ped.pgm", pedestrian)
    (root / "000000.txt").write_text("Car car.pgm gt\nPedestrian ped.pgm gt\n")
    (root / "000001.txt").write_text("size 8 6\n")
    return root


@pytest.fixture
def image_and_prior(tmp_path: Path) -> tuple[Path, Path]:
    """A 48x160 PPM image and a matching prior with one Car region."""
    rng = np.random.default_rng(0)
    image = tmp_path / "image.ppm"
    image.write_bytes(encode_ppm(rng.integers(0, 256, (48, 160, 3), dtype=np.uint8)))
    pixels = np.zeros((48, 160), dtype=np.uint8)
    pixels[10:30, 40:90] = 85
    prior = tmp_path / "prior.pgm"
    prior.write_bytes(encode_pgm(pixels))
    return image, prior


def test_encode_priors(tmp_path: Path, masks_dir: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """
    Integration test for encode-priors: one PGM per frame plus a run manifest.
    """
    out = tmp_path / "priors"
    assert main(["encode-priors", "--masks", str(masks_dir), "--out", str(out)]) == EXIT_OK
    assert "Encoded 2 prior map(s)" in capsys.readouterr().out

    first = read_pgm(out / "000000.pgm").pixels
    assert first[1, 1] == 85
    assert first[4, 5] == 170  # overlap goes to Pedestrian
    assert first[0, 0] == 0
    assert not read_pgm(out / "000001.pgm").pixels.any()

    manifest = json.loads((tmp_path / "priors.manifest.json").read_text())
    assert manifest["command"] == "encode-priors"
    assert len(manifest["config_hash"]) == 16
    assert len(manifest["input_paths"]) == 2


def test_encode_priors_custom_table(tmp_path: Path, masks_dir: Path) -> None:
    """
    Integration test for encode-priors with an intensity table file.
    """
    table = tmp_path / "table.txt"
    table.write_text("Car 10\nPedestrian 20\nCyclist 30\n")
    out = tmp_path / "priors"
    args = ["encode-priors", "--masks", str(masks_dir), "--out", str(out), "--intensity-table", str(table)]
    assert main(args) == EXIT_OK
    pixels = read_pgm(out / "000000.pgm", {"Car": 10, "Pedestrian": 20, "Cyclist": 30}).pixels
    assert sorted(np.unique(pixels).tolist()) == [0, 10, 20]


def test_encode_priors_empty_directory(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    """
    Integration test for encode-priors on a directory without manifests.
    """
    masks = tmp_path / "masks"
    masks.mkdir()
    out = tmp_path / "priors"
    with caplog.at_level(logging.WARNING):
        assert main(["encode-priors", "--masks", str(masks), "--out", str(out)]) == EXIT_OK
    assert "No mask manifests" in caplog.text
    assert not list(out.glob("*.pgm"))


def test_encode_priors_missing_mask(tmp_path: Path, masks_dir: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """
    Integration test for a manifest naming a mask file that does not exist.
    """
    (masks_dir / "000002.txt").write_text("Cyclist missing.pgm\n")
    rc = main(["encode-priors", "--masks", str(masks_dir), "--out", str(tmp_path / "priors")])
    assert rc == EXIT_DATA_ERROR
    assert "000002" in capsys.readouterr().err


def test_encode_priors_rejects_undecodable_manifest(
    tmp_path: Path, masks_dir: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    """
    Integration test for a manifest that is not UTF-8 text: data error naming the frame.
    """
    (masks_dir / "000003.txt").write_bytes(b"Car car\xff.pgm\n")
    rc = main(["encode-priors", "--masks", str(masks_dir), "--out", str(tmp_path / "priors")])
    assert rc == EXIT_DATA_ERROR
    err = capsys.readouterr().err
    assert "000003" in err
    assert "UTF-8" in err


def test_fuse_writes_snapshot_and_timing(tmp_path: Path, image_and_prior: tuple[Path, Path]) -> None:
    """
    Integration test for fuse: the snapshot equals the library pipeline on the
    same transformed inputs, and repeated runs are byte-identical.
    """
    image, prior = image_and_prior
    out_a, out_b = tmp_path / "a.bin", tmp_path / "b.bin"
    base = ["fuse", "--image", str(image), "--prior", str(prior), "--strategy", "attention", "--seed", "4", "--augment"]
    assert main([*base, "--out", str(out_a)]) == EXIT_OK
    assert main([*base, "--out", str(out_b)]) == EXIT_OK
    assert out_a.read_bytes() == out_b.read_bytes()

    image_t = load_image(image)
    prior_t = map_to_tensor(read_pgm(prior))
    image_t, prior_t = apply(image_t, prior_t, sample_transform(4, True, image_t.spatial))
    expected = run_pipeline(image_t, prior_t, FusionConfig(strategy="attention", seed=4)).head_3d
    assert Tensor.from_bytes(out_a.read_bytes()) == expected

    timing = json.loads((tmp_path / "a.bin.timing.json").read_text())
    assert [s["name"] for s in timing["stages"]] == ["prior_to_tensor", "backbone", "aggregate", "fuse", "heads"]
    manifest = json.loads((tmp_path / "a.bin.manifest.json").read_text())
    assert (manifest["command"], manifest["seed"]) == ("fuse", 4)


def test_fuse_usage_and_data_errors(
    tmp_path: Path, image_and_prior: tuple[Path, Path], capsys: pytest.CaptureFixture[str]
) -> None:
    """
    Integration test for fuse exit codes: unknown strategy and misaligned prior.
    """
    image, prior = image_and_prior
    out = str(tmp_path / "out.bin")
    rc = main(["fuse", "--image", str(image), "--prior", str(prior), "--strategy", "sum", "--out", out])
    assert rc == EXIT_USAGE

    narrow = tmp_path / "narrow.pgm"
    narrow.write_bytes(encode_pgm(np.zeros((48, 150), dtype=np.uint8)))
    capsys.readouterr()
    rc = main(["fuse", "--image", str(image), "--prior", str(narrow), "--out", out])
    assert rc == EXIT_DATA_ERROR
    assert "error:" in capsys.readouterr().err
    assert not Path(out).exists()


def test_fuse_rejects_non_finite_snapshot(
    tmp_path: Path, image_and_prior: tuple[Path, Path], capsys: pytest.CaptureFixture[str]
) -> None:
    """
    Integration test for an image snapshot holding a NaN: data error, no output.
    """
    _, prior = image_and_prior
    values = np.zeros((1, 3, 48, 160))
    values[0, 1, 5, 7] = np.nan
    snapshot = tmp_path / "image.bin"
    snapshot.write_bytes(struct.pack("<4I", *values.shape) + values.astype("<f8").tobytes())
    out = tmp_path / "out.bin"
    rc = main(["fuse", "--image", str(snapshot), "--prior", str(prior), "--out", str(out)])
    assert rc == EXIT_DATA_ERROR
    assert "finite" in capsys.readouterr().err
    assert not out.exists()


def test_fuse_matches_frozen_snapshot(tmp_path: Path, update_golden: bool) -> None:
    """
    Regression test for multiply/after_dla on a fixed synthetic frame: the 3D-head
    snapshot hashes to the frozen digest in tests/data.
    """
    rows, cols = np.mgrid[0:48, 0:160]
    pixels = np.stack([(3 * rows + 5 * cols + 40 * ch) % 256 for ch in range(3)], axis=-1).astype(np.uint8)
    image = tmp_path / "image.ppm"
    image.write_bytes(encode_ppm(pixels))
    gray = np.zeros((48, 160), dtype=np.uint8)
    gray[10:30, 40:90] = 85
    gray[20:40, 120:140] = 170
    prior = tmp_path / "prior.pgm"
    prior.write_bytes(encode_pgm(gray))

    out = tmp_path / "head.bin"
    args = ["fuse", "--image", str(image), "--prior", str(prior), "--strategy", "multiply", "--point", "after_dla"]
    assert main([*args, "--seed", "0", "--out", str(out)]) == EXIT_OK
    blob = out.read_bytes()
    entry = {"shape": list(Tensor.from_bytes(blob).shape), "sha256": hashlib.sha256(blob).hexdigest()}

    frozen = json.loads(GOLDEN_FILE.read_text()) if GOLDEN_FILE.exists() else {}
    if update_golden:
        frozen[GOLDEN_KEY] = entry
        GOLDEN_FILE.parent.mkdir(parents=True, exist_ok=True)
        GOLDEN_FILE.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    elif GOLDEN_KEY not in frozen:
        pytest.skip(f"no frozen digest for {GOLDEN_KEY}; run pytest --update-golden once and commit {GOLDEN_FILE.name}")
    assert frozen[GOLDEN_KEY] == entry


def test_eval_writes_all_reports(
    tmp_path: Path, three_frame_labels: dict[str, list[Label3D]], capsys: pytest.CaptureFixture[str]
) -> None:
    """
    Integration test for eval: JSON, CSV and text reports with absent values shown as '-'.
    """
    labels = {f: [g for g in gts if g.class_name != "Pedestrian"] for f, gts in three_frame_labels.items()}
    gt = write_label_dir(tmp_path / "gt", labels)
    det = write_detection_dir(
        tmp_path / "det", {f: [as_detection(g) for g in gts if not g.is_dontcare] for f, gts in labels.items()}
    )
    out = tmp_path / "report.json"
    rc = main(["eval", "--gt", str(gt), "--det", str(det), "--method", "Ours", "--iou-config", "primary", "--out", str(out)])
    assert rc == EXIT_OK
    assert "AP_3D (R40)" in capsys.readouterr().out

    report = json.loads(out.read_text())
    assert report["methods"] == ["Ours"]
    assert report["iou_configs"] == ["primary"]
    assert len(report["cells"]) == 9
    assert report["manifest"]["command"] == "eval"

    with (tmp_path / "report.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 9 * 3
    car = next(r for r in rows if (r["class"], r["difficulty"], r["metric"]) == ("Car", "Easy", "ap3d"))
    assert float(car["value"]) == pytest.approx(100.0)
    assert all(r["value"] == "" for r in rows if r["class"] == "Pedestrian")

    text = (tmp_path / "report.txt").read_text()
    pedestrian_rows = [line for line in text.splitlines() if line.startswith("Ours") and "Pedestrian" in line]
    assert pedestrian_rows and all(line.split()[2:] == ["-", "-", "-"] for line in pedestrian_rows)


def test_eval_errors(
    tmp_path: Path, three_frame_labels: dict[str, list[Label3D]], capsys: pytest.CaptureFixture[str]
) -> None:
    """
    Integration test for eval exit codes: method count mismatch and frame set mismatch.
    """
    gt = write_label_dir(tmp_path / "gt", three_frame_labels)
    det = write_detection_dir(tmp_path / "det", {"000000": [], "000001": []})
    out = str(tmp_path / "report.json")
    rc = main(["eval", "--gt", str(gt), "--det", str(det), "--det", str(det), "--method", "A", "--out", out])
    assert rc == EXIT_USAGE

    capsys.readouterr()
    assert main(["eval", "--gt", str(gt), "--det", str(det), "--out", out]) == EXIT_DATA_ERROR
    assert "000002" in capsys.readouterr().err
    assert not Path(out).exists()


def test_gradcheck_passes(capsys: pytest.CaptureFixture[str]) -> None:
    """
    Integration test for gradcheck: every check reported, all within tolerance.
    """
    assert main(["gradcheck", "--trials", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    for strategy in ("multiply", "concat", "attention"):
        assert f"fuse[{strategy}]" in out
    assert "FAIL" not in out


def test_gradcheck_reports_corrupted_kernel(capsys: pytest.CaptureFixture[str]) -> None:
    """
    Integration test for gradcheck with a deliberately wrong conv1x1 gradient.
    """
    assert main(["gradcheck", "--trials", "1", "--corrupt", "conv1x1"]) == EXIT_CHECK_FAILED
    captured = capsys.readouterr()
    assert any(line.startswith("conv1x1") and line.endswith("FAIL") for line in captured.out.splitlines())
    assert "conv1x1" in captured.err
    assert main(["gradcheck", "--trials", "0"]) == EXIT_USAGE
