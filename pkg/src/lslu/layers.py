"""CNN building blocks: convolution, batch norm, pooling, dropout, losses.

The functional forms (``conv2d``, ``batchnorm``, ...) are compositions of
tensor primitives, so their gradients come from the tape.  The classes wrap
them as graph nodes carrying parameters, buffers and shape/FLOP bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ChannelMismatch, DegenerateBatch, InvalidRate, ShapeMismatch
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ActivationKind:
    """Base activation ``f``: one of relu, leakyrelu, gelu, silu."""

    name: str = "relu"
    slope: float = 0.01

    NAMES = ("relu", "leakyrelu", "gelu", "silu")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ValueError(f"unknown base activation {self.name!r}; choose from {self.NAMES}")
        if self.name == "leakyrelu" and not 0 < self.slope < 1:
            raise ValueError("LeakyReLU slope must lie in (0, 1)")

    @classmethod
    def parse(cls, spec) -> "ActivationKind":
        if isinstance(spec, ActivationKind):
            return spec
        name, _, slope = str(spec).lower().replace("_", "").replace("-", "").partition(":")
        return cls(name, float(slope)) if slope else cls(name)

    @property
    def positively_homogeneous(self) -> bool:
        return self.name in ("relu", "leakyrelu")

    @property
    def has_kink(self) -> bool:
        return self.name in ("relu", "leakyrelu")

    def __call__(self, x: Tensor) -> Tensor:
        return base_activation(self, x)

    def __str__(self) -> str:
        return f"leakyrelu:{self.slope}" if self.name == "leakyrelu" else self.name


RELU = ActivationKind("relu")


def base_activation(kind, x: Tensor) -> Tensor:
    kind = ActivationKind.parse(kind)
    if kind.name == "relu":
        return T.relu(x)
    if kind.name == "leakyrelu":
        return T.leaky_relu(x, kind.slope)
    if kind.name == "gelu":
        return T.gelu(x)
    return T.silu(x)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation via im2col + matmul, plus a per-channel bias (skipped when None)."""
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects N,C,H,W input, got {x.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeMismatch("only square kernels are supported")
    if x.shape[1] != c_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    n = x.shape[0]
    cols = T.im2col(x, k, stride, pad)
    ho = T.conv_output_size(x.shape[2], k, stride, pad)
    wo = T.conv_output_size(x.shape[3], k, stride, pad)
    out = T.matmul(T.reshape(weight, (c_out, c_in * k * k)), cols)
    out = T.transpose(T.reshape(out, (c_out, n, ho, wo)), (1, 0, 2, 3))
    return out if bias is None else T.add(out, bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear expects (N, {weight.shape[1]}) input, got {x.shape}")
    return T.add(T.matmul(x, T.transpose(weight)), bias)


class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float32):
        if eps < 0:
            raise ValueError("eps must be non-negative")
        if not 0 <= momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches_tracked = 0
        self.training = True

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def set_running_stats(self, mean, var) -> None:
        self.running_mean = np.asarray(mean, dtype=self.gamma.dtype).reshape(self.channels).copy()
        self.running_var = np.asarray(var, dtype=self.gamma.dtype).reshape(self.channels).copy()
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")
        self.num_batches_tracked = max(self.num_batches_tracked, 1)


def batchnorm(x: Tensor, s: BatchNormState, training: Optional[bool] = None) -> Tensor:
    """Normalize per channel, then apply ``gamma`` and ``beta``.

    Train mode uses the biased batch variance and updates the running
    statistics (the running variance stores the unbiased estimate).  Eval mode
    normalizes with the running statistics.
    """
    training = s.training if training is None else training
    if x.ndim not in (2, 4) or x.shape[1] != s.channels:
        raise ShapeMismatch(f"batchnorm over {s.channels} channels got input {x.shape}")
    count = x.size // s.channels
    if training:
        if count < 2:
            raise DegenerateBatch(f"need at least 2 values per channel in train mode, got {count}")
        out, mu, var = T.batch_norm_train(x, s.gamma, s.beta, s.eps)
        m = s.momentum
        s.running_mean = ((1 - m) * s.running_mean + m * mu).astype(s.running_mean.dtype)
        unbiased = var * (count / (count - 1))
        s.running_var = ((1 - m) * s.running_var + m * unbiased).astype(s.running_var.dtype)
        s.num_batches_tracked += 1
        return out
    denom = np.sqrt(s.running_var + s.eps).astype(x.dtype)
    xhat = T.div(T.sub(x, Tensor(s.running_mean, dtype=x.dtype)), Tensor(denom, dtype=x.dtype))
    return T.add(T.mul(xhat, s.gamma), s.beta)


def maxpool(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    return T.maxpool2d(x, k, stride)


def avgpool(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    return T.avgpool2d(x, k, stride)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1 - p)
    return T.mul(x, Tensor(mask, dtype=x.dtype))


def loss(kind: str, logits: Tensor, targets) -> Tensor:
    if kind == "cross_entropy":
        return T.cross_entropy(logits, targets)
    if kind in ("bce_with_logits", "bce"):
        return T.bce_with_logits(logits, targets)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class Layer:
    """A node in a :class:`~lslu.networks.LayerGraph`."""

    kind = "layer"

    def __init__(self, name: Optional[str] = None):
        self.name = name or self.kind
        self.training = True

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def forward(self, x: Tensor, rng=None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.forward(x, rng)

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def flops(self, shape: tuple) -> int:
        return 0

    def kink_margin(self, x: np.ndarray) -> float:
        """Distance of ``x`` from the nearest non-differentiable point of this node."""
        return float("inf")

    def set_training(self, flag: bool) -> None:
        self.training = flag

    def astype(self, dtype) -> None:
        for t in self.params().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for key, arr in self.buffers().items():
            if np.issubdtype(np.asarray(arr).dtype, np.floating):
                self.set_buffer(key, np.asarray(arr).astype(dtype))

    def set_buffer(self, key: str, value) -> None:
        raise KeyError(f"{self.name} has no buffer {key!r}")

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    kind = "conv"

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        pad: int = 0,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
        name: Optional[str] = None,
        weight=None,
        bias_value=None,
    ):
        super().__init__(name)
        if k < 1:
            raise ShapeMismatch("kernel extent must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        if weight is None:
            weight = _he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        weight = np.asarray(weight, dtype=dtype)
        if weight.shape != (c_out, c_in, k, k):
            raise ShapeMismatch(f"weight shape {weight.shape} != {(c_out, c_in, k, k)}")
        self.weight = Tensor(weight, requires_grad=True, dtype=dtype)
        b = np.zeros(c_out) if bias_value is None else np.asarray(bias_value).reshape(c_out)
        self.has_bias = bool(bias)
        self.bias = Tensor(b, requires_grad=self.has_bias, dtype=dtype)
        self.stride, self.pad = int(stride), int(pad)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def params(self) -> dict:
        out = {"weight": self.weight}
        if self.has_bias:
            out["bias"] = self.bias
        return out

    def buffers(self) -> dict:
        return {} if self.has_bias else {"bias": self.bias.data}

    def set_buffer(self, key, value):
        if key != "bias" or self.has_bias:
            super().set_buffer(key, value)
        self.bias = Tensor(value, dtype=np.asarray(value).dtype)

    def forward(self, x, rng=None):
        # a frozen all-zero bias is a no-op; skip the full-size add
        skip = not self.has_bias and not np.any(self.bias.data)
        return conv2d(x, self.weight, None if skip else self.bias, self.stride, self.pad)

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise ShapeMismatch(f"{self.name}: expected ({self.c_in}, H, W), got {shape}")
        _, h, w = shape
        if h + 2 * self.pad < self.k or w + 2 * self.pad < self.k:
            raise ShapeMismatch(f"{self.name}: kernel larger than input {shape}")
        return (
            self.c_out,
            T.conv_output_size(h, self.k, self.stride, self.pad),
            T.conv_output_size(w, self.k, self.stride, self.pad),
        )

    def flops(self, shape):
        _, ho, wo = self.output_shape(shape)
        return 2 * self.c_in * self.k * self.k * self.c_out * ho * wo


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float32, name=None):
        super().__init__(name)
        self.state = BatchNormState(channels, eps, momentum, dtype)

    @property
    def channels(self) -> int:
        return self.state.channels

    def set_training(self, flag):
        self.training = flag
        self.state.training = flag

    def params(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def buffers(self):
        s = self.state
        return {
            "running_mean": s.running_mean,
            "running_var": s.running_var,
            "num_batches_tracked": np.array([s.num_batches_tracked], dtype=np.int64),
        }

    def set_buffer(self, key, value):
        s = self.state
        value = np.asarray(value)
        if key == "running_mean":
            s.running_mean = value.copy()
        elif key == "running_var":
            s.running_var = value.copy()
        elif key == "num_batches_tracked":
            s.num_batches_tracked = int(value.reshape(-1)[0])
        else:
            super().set_buffer(key, value)

    def forward(self, x, rng=None):
        return batchnorm(x, self.state, self.training)

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ChannelMismatch(f"{self.name}: expected {self.channels} channels, got {shape}")
        return shape

    def flops(self, shape):
        return int(np.prod(shape))


class Activation(Layer):
    kind = "act"

    def __init__(self, base="relu", name=None):
        super().__init__(name)
        self.base = ActivationKind.parse(base)

    def forward(self, x, rng=None):
        return base_activation(self.base, x)

    def flops(self, shape):
        return int(np.prod(shape))

    def kink_margin(self, x):
        return float(np.min(np.abs(x))) if self.base.has_kink and x.size else float("inf")


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, k: int = 2, stride: Optional[int] = None, name=None):
        super().__init__(name)
        self.k, self.stride = int(k), int(stride or k)

    def forward(self, x, rng=None):
        return maxpool(x, self.k, self.stride)

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.k or w < self.k:
            raise ShapeMismatch(f"{self.name}: window {self.k} larger than {h}x{w}")
        return (c, (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1)

    def kink_margin(self, x):
        # gap between the largest and second-largest value in each window
        n, c, h, w = x.shape
        ho, wo = (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1
        win = np.lib.stride_tricks.sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        win = win[:, :, :: self.stride, :: self.stride][:, :, :ho, :wo].reshape(n, c, ho, wo, -1)
        if win.shape[-1] < 2:
            return float("inf")
        top = np.sort(win, axis=-1)[..., -2:]
        gap = top[..., 1] - top[..., 0]
        # exact ties come from flat inputs (e.g. rectified zeros) that a small
        # perturbation of upstream values cannot reorder, so they are not kinks
        gap = gap[gap > 0]
        return float(gap.min()) if gap.size else float("inf")


class AvgPool2d(MaxPool2d):
    kind = "avgpool"

    def forward(self, x, rng=None):
        return avgpool(x, self.k, self.stride)

    def kink_margin(self, x):
        return float("inf")


class GlobalAvgPool(Layer):
    """Spatial mean: ``(N, C, H, W) -> (N, C)``."""

    kind = "gap"

    def forward(self, x, rng=None):
        return T.mean(x, (2, 3))

    def output_shape(self, shape):
        return (shape[0],)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, rng=None):
        return T.reshape(x, (x.shape[0], -1))

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float = 0.0, name=None):
        super().__init__(name)
        if not 0 <= p < 1:
            raise InvalidRate(f"dropout rate must lie in [0, 1), got {p}")
        self.p = float(p)

    def forward(self, x, rng=None):
        return dropout(x, self.p, self.training, rng)


class Linear(Layer):
    kind = "linear"

    def __init__(self, d_in: int, d_out: int, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (d_out, d_in)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, rng=None):
        return linear(x, self.weight, self.bias)

    def output_shape(self, shape):
        if shape != (self.weight.shape[1],):
            raise ShapeMismatch(f"{self.name}: expected ({self.weight.shape[1]},), got {shape}")
        return (self.weight.shape[0],)

    def flops(self, shape):
        return 2 * self.weight.shape[0] * self.weight.shape[1]
