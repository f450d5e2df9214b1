"""
Dense rank-4 tensors (batch, channel, height, width) and the handful of
kernels the fusion module is built from.

Every differentiable kernel is a small class: ``forward`` records what the
backward pass needs, ``backward`` maps an upstream gradient to gradients for
each input. The functional helpers (``bilinear_upsample``, ``standardize``,
...) run a throwaway kernel instance and return only the forward result.
"""

import math
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from app.errors import NonFiniteError, ShapeError, ShapeMismatch, StateError, TruncatedData

DEFAULT_EPS = 1e-5
_SNAPSHOT_HEADER = struct.Struct("<4I")


class Tensor:
    """Immutable float64 array of shape (batch, channels, height, width)."""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray | Sequence) -> None:
        array = np.array(data, dtype=np.float64, order="C", copy=True)
        if array.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (b, c, h, w), got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("tensor values must be finite")
        array.setflags(write=False)
        self._data = array

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, int, int, int]:
        b, c, h, w = self._data.shape
        return (b, c, h, w)

    @property
    def channels(self) -> int:
        return self._data.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return (self._data.shape[2], self._data.shape[3])

    @classmethod
    def zeros(cls, shape: tuple[int, int, int, int]) -> "Tensor":
        return cls(np.zeros(shape))

    def channel_slice(self, start: int, stop: int) -> "Tensor":
        return Tensor(self._data[:, start:stop])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def to_bytes(self) -> bytes:
        header = _SNAPSHOT_HEADER.pack(*self.shape)
        return header + self._data.astype("<f8", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Tensor":
        if len(blob) < _SNAPSHOT_HEADER.size:
            raise TruncatedData("snapshot shorter than its 16-byte header")
        dims = _SNAPSHOT_HEADER.unpack_from(blob)
        expected = math.prod(dims) * 8
        payload = blob[_SNAPSHOT_HEADER.size : _SNAPSHOT_HEADER.size + expected]
        if len(payload) < expected:
            raise TruncatedData(f"snapshot payload has {len(payload)} bytes, expected {expected}")
        return cls(np.frombuffer(payload, dtype="<f8").reshape(dims))


def write_snapshot(t: Tensor, sink: BinaryIO) -> None:
    sink.write(t.to_bytes())


def read_snapshot(source: BinaryIO) -> Tensor:
    return Tensor.from_bytes(source.read())


def _as_array(t: "Tensor | np.ndarray") -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


# ---------------------------------------------------------------------------
# Kernels


class Kernel:
    """A forward computation that remembers what its backward pass needs."""

    name = "kernel"

    def __init__(self) -> None:
        self._saved: tuple | None = None

    def _require_forward(self) -> tuple:
        if self._saved is None:
            raise StateError(f"{self.name}: backward() called before forward()")
        return self._saved


def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row ``i`` holds the bilinear weights producing output sample ``i``.

    Half-pixel convention: ``src = (dst + 0.5) * in / out - 0.5``, clamped to
    the valid range, so a size-1 input broadcasts and equal sizes give the
    identity.
    """
    weights = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for dst in range(out_size):
        src = min(max((dst + 0.5) * scale - 0.5, 0.0), in_size - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        weights[dst, lo] += 1.0 - frac
        if frac > 0.0:
            weights[dst, hi] += frac
    return weights


class BilinearUpsample(Kernel):
    """Separable bilinear resampling; also used for downsampling."""

    name = "bilinear_upsample"

    def __init__(self, out_h: int, out_w: int) -> None:
        super().__init__()
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"output size must be at least 1x1, got {out_h}x{out_w}")
        self.out_h = out_h
        self.out_w = out_w

    def forward(self, t: Tensor) -> Tensor:
        _, _, h, w = t.shape
        rows = interpolation_matrix(h, self.out_h)
        cols = interpolation_matrix(w, self.out_w)
        self._saved = (rows, cols)
        return Tensor(rows @ t.data @ cols.T)

    def backward(self, upstream: Tensor) -> Tensor:
        rows, cols = self._require_forward()
        return Tensor(rows.T @ _as_array(upstream) @ cols)


class Standardize(Kernel):
    """Per (batch, channel) zero mean and unit population variance."""

    name = "standardize"

    def __init__(self, eps: float = DEFAULT_EPS) -> None:
        super().__init__()
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.eps = eps

    def forward(self, t: Tensor) -> Tensor:
        x = t.data
        mean = x.mean(axis=(2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        y = centered * inv_std
        self._saved = (y, inv_std)
        return Tensor(y)

    def backward(self, upstream: Tensor) -> Tensor:
        y, inv_std = self._require_forward()
        g = _as_array(upstream)
        g_mean = g.mean(axis=(2, 3), keepdims=True)
        gy_mean = (g * y).mean(axis=(2, 3), keepdims=True)
        return Tensor(inv_std * (g - g_mean - y * gy_mean))


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, int, int, int]:
    (ba, ca, ha, wa), (bb, cb, hb, wb) = a.shape, b.shape
    if (ba, ha, wa) != (bb, hb, wb) or (ca != cb and 1 not in (ca, cb)):
        raise ShapeMismatch(f"cannot multiply shapes {a.shape} and {b.shape}")
    return (ba, max(ca, cb), ha, wa)


def _reduce_to(grad: np.ndarray, channels: int) -> np.ndarray:
    if grad.shape[1] != channels:
        return grad.sum(axis=1, keepdims=True)
    return grad


class EltwiseMul(Kernel):
    """Elementwise product; a single-channel operand broadcasts over channels."""

    name = "eltwise_mul"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape(a, b)
        self._saved = (a.data, b.data)
        return Tensor(a.data * b.data)

    def backward(self, upstream: Tensor) -> tuple[Tensor, Tensor]:
        a, b = self._require_forward()
        g = _as_array(upstream)
        return Tensor(_reduce_to(g * b, a.shape[1])), Tensor(_reduce_to(g * a, b.shape[1]))


class ConcatChannels(Kernel):
    name = "concat_channels"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        (ba, _, ha, wa), (bb, _, hb, wb) = a.shape, b.shape
        if (ba, ha, wa) != (bb, hb, wb):
            raise ShapeMismatch(f"cannot concatenate shapes {a.shape} and {b.shape}")
        self._saved = (a.channels,)
        return Tensor(np.concatenate([a.data, b.data], axis=1))

    def backward(self, upstream: Tensor) -> tuple[Tensor, Tensor]:
        (split,) = self._require_forward()
        g = _as_array(upstream)
        return Tensor(g[:, :split]), Tensor(g[:, split:])


@dataclass(frozen=True)
class Conv1x1Params:
    weight: np.ndarray  # (out_channels, in_channels)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self) -> None:
        weight = np.array(self.weight, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"weight {weight.shape} and bias {bias.shape} disagree")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise NonFiniteError("convolution parameters must be finite")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "Conv1x1Params":
        return cls(weight=np.eye(channels), bias=np.zeros(channels))

    @classmethod
    def seeded(
        cls, in_channels: int, out_channels: int, rng: np.random.Generator
    ) -> "Conv1x1Params":
        """Fixed random weights scaled by 1/sqrt(fan_in), zero bias."""
        weight = rng.standard_normal((out_channels, in_channels)) / math.sqrt(in_channels)
        return cls(weight=weight, bias=np.zeros(out_channels))


class Conv1x1(Kernel):
    """Pointwise channel projection.

    Input channels are accumulated one at a time in index order, so the
    reduction order is fixed and a zero weight column contributes exactly
    nothing.
    """

    name = "conv1x1"

    def __init__(self, params: Conv1x1Params) -> None:
        super().__init__()
        self.params = params

    def forward(self, t: Tensor) -> Tensor:
        if t.channels != self.params.in_channels:
            raise ShapeMismatch(
                f"conv1x1 expects {self.params.in_channels} input channels, got {t.channels}"
            )
        x = t.data
        b, _, h, w = x.shape
        out = np.empty((b, self.params.out_channels, h, w))
        out[...] = self.params.bias[None, :, None, None]
        for i in range(self.params.in_channels):
            out += self.params.weight[None, :, i, None, None] * x[:, i : i + 1]
        self._saved = (x,)
        return Tensor(out)

    def backward(self, upstream: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Gradients for the input, the weight matrix and the bias."""
        (x,) = self._require_forward()
        g = _as_array(upstream)
        grad_x = np.einsum("oi,bohw->bihw", self.params.weight, g)
        grad_w = np.einsum("bohw,bihw->oi", g, x)
        grad_b = g.sum(axis=(0, 2, 3))
        return Tensor(grad_x), grad_w, grad_b


def _logistic(z: np.ndarray) -> np.ndarray:
    # Split by sign so large |z| never overflows exp().
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LogisticGate(Kernel):
    """``out = x * logistic(a * s + b)`` with a single-channel gate source ``s``."""

    name = "logistic_gate"

    def __init__(self, a: float, b: float) -> None:
        super().__init__()
        self.a = float(a)
        self.b = float(b)

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        _broadcast_shape(x, s)
        gate = _logistic(self.a * s.data + self.b)
        self._saved = (x.data, s.data, gate)
        return Tensor(x.data * gate)

    def backward(self, upstream: Tensor) -> tuple[Tensor, Tensor, float, float]:
        """Gradients for ``x``, ``s`` and the scalars ``a`` and ``b``."""
        x, s, gate = self._require_forward()
        g = _as_array(upstream)
        grad_x = _reduce_to(g * gate, x.shape[1])
        grad_z = _reduce_to(g * x * gate * (1.0 - gate), s.shape[1])
        return Tensor(grad_x), Tensor(grad_z * self.a), float((grad_z * s).sum()), float(grad_z.sum())


def avg_pool2x2(t: Tensor) -> Tensor:
    b, c, h, w = t.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 average pooling needs even spatial dims, got {h}x{w}")
    return Tensor(t.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))


# ---------------------------------------------------------------------------
# Functional forms


def bilinear_upsample(t: Tensor, out_h: int, out_w: int) -> Tensor:
    return BilinearUpsample(out_h, out_w).forward(t)


def standardize(t: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    return Standardize(eps).forward(t)


def eltwise_mul(a: Tensor, b: Tensor) -> Tensor:
    return EltwiseMul().forward(a, b)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return ConcatChannels().forward(a, b)


def conv1x1(t: Tensor, p: Conv1x1Params) -> Tensor:
    return Conv1x1(p).forward(t)


def logistic_gate(x: Tensor, s: Tensor, a: float, b: float) -> Tensor:
    return LogisticGate(a, b).forward(x, s)


# ---------------------------------------------------------------------------
# Finite differences

LossFn = Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]]


def grad_check(fn: LossFn, inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(inputs)`` returns a scalar loss and its analytic gradient with respect
    to every input. Each input element is perturbed by +/-h in turn; the error
    for one element is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    base = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    _, analytic = fn(base)
    worst = 0.0
    for k, x in enumerate(base):
        grad = np.asarray(analytic[k], dtype=np.float64).reshape(x.shape)
        flat = x.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + h
            plus, _ = fn(base)
            flat[idx] = original - h
            minus, _ = fn(base)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = float(grad.reshape(-1)[idx])
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst


def projected_loss(out: Tensor, weights: np.ndarray) -> float:
    """Scalar ``sum(weights * out)``; ``weights`` is the upstream gradient."""
    return float((out.data * weights).sum())
