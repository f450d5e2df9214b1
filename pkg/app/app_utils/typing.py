from typing import Literal

from pydantic import BaseModel, Field


class StageTiming(BaseModel):
    """Wall-clock time and allocator peak of one pipeline stage."""

    name: str
    ms: float = Field(ge=0)
    peak_bytes: int = Field(ge=0)


class TimingReport(BaseModel):
    """Per-stage timings of one pipeline run, in execution order."""

    stages: list[StageTiming]
    total_ms: float = Field(ge=0)
    peak_bytes: int = Field(ge=0)
    log_type: Literal["timing"] = "timing"

    @property
    def stage_names(self) -> list[str]:
        return [s.name for s in self.stages]

    @property
    def per_stage_ms(self) -> dict[str, float]:
        """Milliseconds per stage name; repeated stages are summed."""
        totals: dict[str, float] = {}
        for s in self.stages:
            totals[s.name] = totals.get(s.name, 0.0) + s.ms
        return totals


class RunManifest(BaseModel):
    """Provenance written next to every command output."""

    command: str
    config_hash: str = Field(pattern=r"^[0-9a-f]{16}$", description="64-bit flag hash as 16 hex digits")
    input_paths: list[str] = []
    seed: int | None = None
    tool_version: str
    wall_ms: int = Field(ge=0)
    log_type: Literal["manifest"] = "manifest"
