import hashlib
import json
import logging
import os
from importlib import metadata
from pathlib import Path
from typing import Any

from app.app_utils.files import atomic_write_text
from app.app_utils.typing import RunManifest

THREADS_ENV = "SLAM3D_THREADS"
PACKAGE_NAME = "slam3d-toolkit"


def parse_key_value_pairs(kv_string: str | None) -> dict[str, str]:
    """Parse KEY=VALUE pairs separated by commas or newlines; ``#`` starts a comment."""
    result = {}
    if kv_string:
        for line in kv_string.splitlines():
            line = line.split("#", 1)[0]
            for pair in line.split(","):
                if not pair.strip():
                    continue
                if "=" in pair:
                    key, value = pair.split("=", 1)
                    result[key.strip()] = value.strip()
                else:
                    logging.warning(f"Skipping malformed key-value pair: {pair.strip()}")
    return result


def worker_count() -> int:
    """Worker pool size: ``SLAM3D_THREADS`` when set, else the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logging.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
    return max(1, os.cpu_count() or 1)


def tool_version() -> str:
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return "0.0.0+local"


def config_hash(flags: dict[str, Any]) -> str:
    """64-bit hash of the canonical JSON of ``flags``: the first 8 SHA-256 bytes as 16 hex digits."""
    canonical = json.dumps(flags, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def build_manifest(
    command: str,
    flags: dict[str, Any],
    input_paths: list[str],
    wall_ms: float,
    seed: int | None = None,
) -> RunManifest:
    return RunManifest(
        command=command,
        config_hash=config_hash(flags),
        input_paths=[str(p) for p in input_paths],
        seed=seed,
        tool_version=tool_version(),
        wall_ms=round(wall_ms),
    )


def write_run_manifest(manifest: RunManifest, path: Path) -> None:
    """Write the run manifest next to a command's outputs."""
    atomic_write_text(path, manifest.model_dump_json(indent=2) + "\n")
    logging.info(f"Run manifest written to {path}")
