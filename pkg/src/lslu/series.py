"""Learnable series activation and the blended activation schedule.

The series activation of a layer with ``N`` terms over a base activation ``f`` is

    S(x) = sum_n [ theta_n * alpha_n * f(x + b_n) + omega_n ]

with one learnable scalar per term for each of theta (amplitude), omega
(offset), alpha (series weight) and b (series shift), shared across channels
and positions.  ``N = 0`` means the plain base activation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import ActivationKind, Layer, base_activation
from .tensor import Tensor

PARAM_KINDS = ("theta", "omega", "alpha", "bias")


@dataclass
class SeriesActivationParams:
    n_terms: int
    base: ActivationKind
    theta: Tensor
    omega: Tensor
    alpha: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.n_terms < 0:
            raise ValueError("term count must be >= 0")
        self.base = ActivationKind.parse(self.base)
        for kind in PARAM_KINDS:
            vec = getattr(self, kind)
            if vec.shape != (self.n_terms,):
                raise ValueError(f"{kind} must have shape ({self.n_terms},), got {vec.shape}")

    def tensors(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_KINDS}

    @property
    def dtype(self):
        return self.theta.dtype


def init_lslu(n_terms: int, base="relu", dtype=np.float32) -> SeriesActivationParams:
    """theta = 1, omega = 0, alpha = 1/N, b = 0, so that S equals f at initialization."""
    if n_terms < 0:
        raise ValueError("term count must be >= 0")
    alpha = np.full(n_terms, 1.0 / n_terms) if n_terms else np.zeros(0)

    def vec(values):
        return Tensor(values, requires_grad=True, dtype=dtype)

    return SeriesActivationParams(
        n_terms=n_terms,
        base=ActivationKind.parse(base),
        theta=vec(np.ones(n_terms)),
        omega=vec(np.zeros(n_terms)),
        alpha=vec(alpha),
        bias=vec(np.zeros(n_terms)),
    )


def lslu_forward(x: Tensor, p: SeriesActivationParams) -> Tensor:
    """Evaluate the series activation elementwise.

    One fused tape node; terms with equal shifts share an evaluation of ``f``
    so the initialized layer is bit-identical to ``f`` (see
    :func:`lslu.tensor.series_activation`).
    """
    if p.n_terms == 0:
        return base_activation(p.base, x)
    return T.series_activation(x, p.theta, p.omega, p.alpha, p.bias, p.base.name, p.base.slope)


class LSLU(Layer):
    """Graph node wrapping a :class:`SeriesActivationParams`."""

    kind = "lslu"

    def __init__(self, n_terms: int = 3, base="relu", dtype=np.float32, name=None, params: Optional[SeriesActivationParams] = None):
        super().__init__(name)
        self.p = params if params is not None else init_lslu(n_terms, base, dtype)

    @property
    def n_terms(self) -> int:
        return self.p.n_terms

    @property
    def base(self) -> ActivationKind:
        return self.p.base

    def params(self):
        return self.p.tensors() if self.p.n_terms else {}

    def forward(self, x, rng=None):
        return lslu_forward(x, self.p)

    def flops(self, shape):
        return int(np.prod(shape))

    def kink_margin(self, x):
        if not self.p.base.has_kink or not x.size:
            return float("inf")
        shifts = self.p.bias.data if self.p.n_terms else np.zeros(1)
        return float(min(np.min(np.abs(x + b)) for b in shifts))


@dataclass
class BlendSchedule:
    """``lambda = current_epoch / total_epochs``, clipped into [0, 1]."""

    total_epochs: int
    current_epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    @property
    def lam(self) -> float:
        return min(max(self.current_epoch / self.total_epochs, 0.0), 1.0)

    def step_to(self, epoch: int) -> float:
        if epoch < self.current_epoch:
            raise ValueError("blend schedule cannot move backwards")
        self.current_epoch = epoch
        self.history.append(self.lam)
        return self.lam


def blended_activation(x: Tensor, lam, base="relu") -> Tensor:
    """``(1 - lam) * f(x) + lam * x``; exact f at lam=0 and exact identity at lam=1."""
    if isinstance(lam, BlendSchedule):
        lam = lam.lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend ratio must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return base_activation(base, x)
    if lam == 1.0:
        return x
    return T.add(T.scale(base_activation(base, x), 1.0 - lam), T.scale(x, lam))


class BlendedActivation(Layer):
    kind = "blend"

    def __init__(self, base="relu", lam: float = 0.0, name=None):
        super().__init__(name)
        self.base = ActivationKind.parse(base)
        self.lam = float(lam)

    def buffers(self):
        return {"lam": np.array([self.lam], dtype=np.float64)}

    def set_buffer(self, key, value):
        if key != "lam":
            super().set_buffer(key, value)
        self.lam = float(np.asarray(value).reshape(-1)[0])

    def astype(self, dtype):
        pass

    @property
    def is_identity(self) -> bool:
        return self.lam == 1.0

    def forward(self, x, rng=None):
        return blended_activation(x, self.lam, self.base)

    def flops(self, shape):
        return int(np.prod(shape))

    def kink_margin(self, x):
        if self.lam == 1.0 or not self.base.has_kink or not x.size:
            return float("inf")
        return float(np.min(np.abs(x)))
