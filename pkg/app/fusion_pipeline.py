"""
Prior-guided feature fusion and its placement around a toy backbone.

The fusion module resamples the prior plane to the feature resolution,
standardizes both operands, combines them (multiply, concat or a logistic
attention gate) and projects the result with a 1x1 convolution. The toy
backbone and aggregator are seeded stand-ins for a real multi-scale network:
they only fix shapes, strides and determinism.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.app_utils.config import parse_key_value_pairs
from app.app_utils.tracing import StageProbe
from app.app_utils.typing import TimingReport
from app.errors import ShapeError, ShapeMismatch, StateError
from app.prior_map import GrayPriorMap, map_to_tensor
from app.tensor_core import (
    DEFAULT_EPS,
    BilinearUpsample,
    ConcatChannels,
    Conv1x1,
    Conv1x1Params,
    EltwiseMul,
    LogisticGate,
    Standardize,
    Tensor,
    avg_pool2x2,
    bilinear_upsample,
    conv1x1,
)

Strategy = Literal["multiply", "concat", "attention"]
FusionPoint = Literal["after_dla", "during_dla", "heads_only"]

STRIDES = (4, 8, 16, 32)
AGGREGATE_CHANNELS = 64

# Sub-streams of the run seed, one per weight owner.
_BACKBONE_STREAM = 1
_AGGREGATE_STREAM = 2
_FUSION_STREAM = 3


def component_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for one component, derived from the run seed."""
    return np.random.default_rng([seed & 0xFFFF_FFFF_FFFF_FFFF, *path])


class FusionConfig(BaseModel):
    """Fusion strategy, injection point and projection settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    strategy: Strategy = "multiply"
    point: FusionPoint = "after_dla"
    out_channels: int = Field(default=64, ge=1)
    eps: float = Field(default=DEFAULT_EPS, gt=0)
    seed: int = 0
    pyramid_channels: tuple[int, int, int, int] = (16, 32, 64, 128)

    @field_validator("pyramid_channels", mode="before")
    @classmethod
    def _split_channels(cls, value: object) -> object:
        if isinstance(value, str):
            return tuple(value.replace("/", " ").split())
        return value

    @field_validator("pyramid_channels")
    @classmethod
    def _positive_channels(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(c < 1 for c in value):
            raise ValueError(f"pyramid channel widths must be positive, got {value}")
        return value

    @classmethod
    def from_text(cls, text: str) -> "FusionConfig":
        """Build from ``key=value`` text; ``pyramid_channels`` is space separated."""
        return cls.model_validate(parse_key_value_pairs(text))


@dataclass(frozen=True)
class FeaturePyramid:
    levels: list[Tensor]
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self) -> None:
        if len(self.levels) != len(self.strides):
            raise ShapeError(f"{len(self.strides)} levels expected, got {len(self.levels)}")
        h0, w0 = self.levels[0].spatial
        base = self.strides[0]
        for level, stride in zip(self.levels, self.strides, strict=True):
            factor = stride // base
            if level.spatial != (h0 // factor, w0 // factor):
                raise ShapeError(f"stride-{stride} level has spatial size {level.spatial}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [level.spatial for level in self.levels]


def toy_backbone(
    image: Tensor, seed: int, channels: tuple[int, ...] = (16, 32, 64, 128)
) -> FeaturePyramid:
    """Four-level pyramid from 2x2 average pooling and seeded 1x1 convolutions.

    Biases are zero, so the pyramid is linear in the image.
    """
    _, _, h, w = image.shape
    if h % STRIDES[-1] or w % STRIDES[-1]:
        raise ShapeError(f"image size {h}x{w} is not divisible by {STRIDES[-1]}")
    x = avg_pool2x2(avg_pool2x2(image))
    levels = []
    for i, width in enumerate(channels):
        if i:
            x = avg_pool2x2(x)
        params = Conv1x1Params.seeded(x.channels, width, component_rng(seed, _BACKBONE_STREAM, i))
        x = conv1x1(x, params)
        levels.append(x)
    return FeaturePyramid(levels=levels)


NodeTap = Callable[[Tensor, int], Tensor]


def toy_aggregate(
    p: FeaturePyramid,
    seed: int,
    tap: NodeTap | None = None,
    out_channels: int = AGGREGATE_CHANNELS,
) -> Tensor:
    """Sum of every level projected to ``out_channels`` and resampled to stride 4.

    ``tap(node_input, node_index)`` replaces a node's input before it is
    projected; it must keep the node's shape.
    """
    out_h, out_w = p.levels[0].spatial
    total = np.zeros((p.levels[0].shape[0], out_channels, out_h, out_w))
    for i, level in enumerate(p.levels):
        x = level
        if tap is not None:
            x = tap(level, i)
            if x.shape != level.shape:
                raise ShapeMismatch(f"node {i} tap changed shape {level.shape} to {x.shape}")
        params = Conv1x1Params.seeded(
            x.channels, out_channels, component_rng(seed, _AGGREGATE_STREAM, i)
        )
        total += bilinear_upsample(conv1x1(x, params), out_h, out_w).data
    return Tensor(total)


@dataclass(frozen=True)
class FusionGrads:
    features: Tensor
    prior: Tensor
    weight: np.ndarray
    bias: np.ndarray
    gate: tuple[float, float] | None = None


class FusionModule:
    """Resample, standardize, combine, project.

    One instance owns the projection (and, for the attention strategy, the
    gate scalars) of one injection site and counts its forward calls.
    """

    def __init__(
        self,
        in_channels: int,
        cfg: FusionConfig,
        out_channels: int | None = None,
        projection: Conv1x1Params | None = None,
        gate: tuple[float, float] | None = None,
        node: int = 0,
    ) -> None:
        self.cfg = cfg
        self.in_channels = in_channels
        combined = in_channels + 1 if cfg.strategy == "concat" else in_channels
        rng = component_rng(cfg.seed, _FUSION_STREAM, node)
        if projection is None:
            projection = Conv1x1Params.seeded(combined, out_channels or cfg.out_channels, rng)
        if projection.in_channels != combined:
            raise ShapeMismatch(
                f"{cfg.strategy} fusion needs a {combined}-channel projection, "
                f"got {projection.in_channels}"
            )
        self.projection = projection
        self.out_channels = projection.out_channels
        if gate is None:
            a, b = rng.standard_normal(2)
            gate = (float(a), float(b))
        self.gate = gate
        self.calls = 0
        self._tape: tuple | None = None

    def forward(self, features: Tensor, prior: Tensor) -> Tensor:
        if features.shape[0] != 1 or prior.shape[:2] != (1, 1):
            raise ShapeError(
                f"expected 1xCxhxw features and a 1x1xHxW prior, got {features.shape} and {prior.shape}"
            )
        if features.channels != self.in_channels:
            raise ShapeMismatch(f"module built for {self.in_channels} channels, got {features.channels}")
        h, w = features.spatial
        ph, pw = prior.spatial
        if ph < h or pw < w:
            raise ShapeError(f"prior {ph}x{pw} is smaller than the feature map {h}x{w}")

        resample = BilinearUpsample(h, w)
        std_features = Standardize(self.cfg.eps)
        std_prior = Standardize(self.cfg.eps)
        f = std_features.forward(features)
        s = std_prior.forward(resample.forward(prior))

        combine: EltwiseMul | ConcatChannels | LogisticGate
        if self.cfg.strategy == "multiply":
            combine = EltwiseMul()
        elif self.cfg.strategy == "concat":
            combine = ConcatChannels()
        else:
            combine = LogisticGate(*self.gate)
        project = Conv1x1(self.projection)
        out = project.forward(combine.forward(f, s))

        self._tape = (resample, std_features, std_prior, combine, project)
        self.calls += 1
        return out

    __call__ = forward

    def backward(self, upstream: Tensor) -> FusionGrads:
        """Gradients of the last forward call for features, prior and parameters."""
        if self._tape is None:
            raise StateError("fuse: backward() called before forward()")
        resample, std_features, std_prior, combine, project = self._tape
        grad_z, grad_w, grad_b = project.backward(upstream)
        gate_grads = None
        if isinstance(combine, LogisticGate):
            grad_f, grad_s, grad_a, grad_gb = combine.backward(grad_z)
            gate_grads = (grad_a, grad_gb)
        else:
            grad_f, grad_s = combine.backward(grad_z)
        return FusionGrads(
            features=std_features.backward(grad_f),
            prior=resample.backward(std_prior.backward(grad_s)),
            weight=grad_w,
            bias=grad_b,
            gate=gate_grads,
        )


def fuse(features: Tensor, prior: Tensor, cfg: FusionConfig) -> Tensor:
    return FusionModule(features.channels, cfg).forward(features, prior)


@dataclass(frozen=True)
class PipelineResult:
    heads: dict[str, Tensor]
    fuse_calls: int
    timing: TimingReport

    @property
    def head_3d(self) -> Tensor:
        return self.heads["3d"]

    @property
    def head_2d(self) -> Tensor:
        return self.heads["2d"]


def run_pipeline(
    image: Tensor,
    prior: GrayPriorMap | Tensor | None,
    cfg: FusionConfig,
    probe: StageProbe | None = None,
) -> PipelineResult:
    """Backbone, aggregation and fusion at ``cfg.point``; ``prior=None`` runs RGB only.

    Returns the tensors routed to the 2D and 3D head slots. Both slots hold
    the same tensor unless the point is ``heads_only``, where the 2D slot
    receives the unfused aggregate.
    """
    probe = probe or StageProbe()
    modules: list[FusionModule] = []
    with probe.run():
        prior_t: Tensor | None = None
        if prior is not None:
            with probe.stage("prior_to_tensor"):
                prior_t = map_to_tensor(prior) if isinstance(prior, GrayPriorMap) else prior
            if prior_t.spatial != image.spatial:
                raise ShapeMismatch(f"image is {image.spatial}, prior is {prior_t.spatial}")

        with probe.stage("backbone"):
            pyramid = toy_backbone(image, cfg.seed, cfg.pyramid_channels)

        if prior_t is not None and cfg.point == "during_dla":
            modules = [
                FusionModule(ch, cfg, out_channels=ch, node=i)
                for i, ch in enumerate(cfg.pyramid_channels)
            ]

            node_prior = prior_t

            def tap(x: Tensor, i: int) -> Tensor:
                with probe.stage("fuse"):
                    return modules[i].forward(x, node_prior)

            with probe.stage("aggregate"):
                aggregate = toy_aggregate(pyramid, cfg.seed, tap)
        else:
            with probe.stage("aggregate"):
                aggregate = toy_aggregate(pyramid, cfg.seed)

        fused = aggregate
        if prior_t is not None and cfg.point in ("after_dla", "heads_only"):
            modules = [FusionModule(aggregate.channels, cfg)]
            with probe.stage("fuse"):
                fused = modules[0].forward(aggregate, prior_t)

        with probe.stage("heads"):
            if cfg.point == "heads_only":
                heads = {"2d": aggregate, "3d": fused}
            else:
                heads = {"2d": fused, "3d": fused}

    fuse_calls = sum(m.calls for m in modules)
    timing = probe.report()
    logging.info(
        f"Pipeline {cfg.strategy}/{cfg.point if prior is not None else 'rgb_only'}: "
        f"{fuse_calls} fuse call(s), {timing.total_ms:.1f} ms, peak {timing.peak_bytes} bytes"
    )
    return PipelineResult(heads=heads, fuse_calls=fuse_calls, timing=timing)
