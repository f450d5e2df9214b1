"""
Finite-difference verification of every differentiable kernel and of the
full fusion module under each strategy.

Each check draws small random operands, builds the scalar loss
``sum(w * y)`` with a random projection ``w`` and compares the analytic
gradients of all inputs against central differences.
"""

import logging
from collections.abc import Callable, Sequence

import numpy as np

from app.fusion_pipeline import FusionConfig, FusionModule, Strategy
from app.tensor_core import (
    BilinearUpsample,
    ConcatChannels,
    Conv1x1,
    Conv1x1Params,
    EltwiseMul,
    LogisticGate,
    LossFn,
    Standardize,
    Tensor,
    grad_check,
    projected_loss,
)

TOLERANCE = 1e-4
FUSION_STRATEGIES: tuple[Strategy, ...] = ("multiply", "concat", "attention")

Grads = list[np.ndarray]
Built = tuple[LossFn, list[np.ndarray]]
Check = Callable[[np.random.Generator], Built]


def _upsample(rng: np.random.Generator) -> Built:
    weights = rng.standard_normal((1, 2, 5, 7))

    def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        k = BilinearUpsample(5, 7)
        y = k.forward(Tensor(xs[0]))
        return projected_loss(y, weights), [k.backward(Tensor(weights)).data]

    return fn, [rng.standard_normal((1, 2, 3, 4))]


def _standardize(rng: np.random.Generator) -> Built:
    weights = rng.standard_normal((1, 2, 4, 4))

    def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        k = Standardize()
        y = k.forward(Tensor(xs[0]))
        return projected_loss(y, weights), [k.backward(Tensor(weights)).data]

    return fn, [rng.standard_normal((1, 2, 4, 4))]


def _eltwise_mul(rng: np.random.Generator) -> Built:
    weights = rng.standard_normal((1, 3, 4, 4))

    def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        k = EltwiseMul()
        y = k.forward(Tensor(xs[0]), Tensor(xs[1]))
        ga, gb = k.backward(Tensor(weights))
        return projected_loss(y, weights), [ga.data, gb.data]

    return fn, [rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 1, 4, 4))]


def _concat(rng: np.random.Generator) -> Built:
    weights = rng.standard_normal((1, 3, 3, 3))

    def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        k = ConcatChannels()
        y = k.forward(Tensor(xs[0]), Tensor(xs[1]))
        ga, gb = k.backward(Tensor(weights))
        return projected_loss(y, weights), [ga.data, gb.data]

    return fn, [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 1, 3, 3))]


def _conv(rng: np.random.Generator) -> Built:
    weights = rng.standard_normal((1, 4, 3, 3))

    def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        k = Conv1x1(Conv1x1Params(weight=xs[1], bias=xs[2]))
        y = k.forward(Tensor(xs[0]))
        gx, gw, gb = k.backward(Tensor(weights))
        return projected_loss(y, weights), [gx.data, gw, gb]

    inputs = [rng.standard_normal((1, 3, 3, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)]
    return fn, inputs


def _gate(rng: np.random.Generator) -> Built:
    weights = rng.standard_normal((1, 3, 4, 4))

    def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        k = LogisticGate(xs[2][0], xs[2][1])
        y = k.forward(Tensor(xs[0]), Tensor(xs[1]))
        gx, gs, ga, gb = k.backward(Tensor(weights))
        return projected_loss(y, weights), [gx.data, gs.data, np.array([ga, gb])]

    inputs = [rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 1, 4, 4)), rng.standard_normal(2)]
    return fn, inputs


def _fusion(strategy: Strategy) -> Check:
    def build(rng: np.random.Generator) -> Built:
        cfg = FusionConfig(strategy=strategy)
        in_channels = 8
        combined = in_channels + 1 if strategy == "concat" else in_channels
        weights = rng.standard_normal((1, cfg.out_channels, 4, 4))

        def fn(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
            module = FusionModule(
                in_channels,
                cfg,
                projection=Conv1x1Params(weight=xs[2], bias=xs[3]),
                gate=(float(xs[4][0]), float(xs[4][1])),
            )
            y = module.forward(Tensor(xs[0]), Tensor(xs[1]))
            g = module.backward(Tensor(weights))
            gate = np.array(g.gate) if g.gate is not None else np.zeros(2)
            return projected_loss(y, weights), [g.features.data, g.prior.data, g.weight, g.bias, gate]

        inputs = [
            rng.standard_normal((1, in_channels, 4, 4)),
            rng.random((1, 1, 8, 8)),
            rng.standard_normal((cfg.out_channels, combined)) / np.sqrt(combined),
            rng.standard_normal(cfg.out_channels),
            rng.standard_normal(2),
        ]
        return fn, inputs

    return build


CHECKS: dict[str, Check] = {
    "bilinear_upsample": _upsample,
    "standardize": _standardize,
    "eltwise_mul": _eltwise_mul,
    "concat_channels": _concat,
    "conv1x1": _conv,
    "logistic_gate": _gate,
    **{f"fuse[{s}]": _fusion(s) for s in FUSION_STRATEGIES},
}


def _corrupted(fn: LossFn) -> LossFn:
    def wrapped(xs: Sequence[np.ndarray]) -> tuple[float, Grads]:
        loss, grads = fn(xs)
        return loss, [grads[0] * 1.5 + 1e-3, *grads[1:]]

    return wrapped


def run_checks(
    trials: int, seed: int, corrupt: str | None = None, names: Sequence[str] | None = None
) -> dict[str, float]:
    """Worst relative error per check over ``trials`` random draws.

    ``corrupt`` names one check whose first analytic gradient is perturbed;
    ``names`` restricts the run to a subset of ``CHECKS``.
    """
    for name in [corrupt, *(names or [])]:
        if name is not None and name not in CHECKS:
            raise KeyError(f"unknown check {name!r}; known: {', '.join(CHECKS)}")
    results: dict[str, float] = {}
    for index, (name, build) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed & 0xFFFF_FFFF_FFFF_FFFF, index])
        worst = 0.0
        for _ in range(trials):
            fn, inputs = build(rng)
            if name == corrupt:
                fn = _corrupted(fn)
            worst = max(worst, grad_check(fn, inputs))
        results[name] = worst
        logging.debug(f"grad check {name}: worst relative error {worst:.3e} over {trials} trial(s)")
    return results
