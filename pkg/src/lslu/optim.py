"""SGD / Adam updates, cosine learning-rate decay and early stopping.

No weight decay anywhere: the series-activation scalars would otherwise be
pulled away from their identity initialization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import MissingGrad
from .tensor import Tensor


def _grads_for(params: Sequence[Tensor], grads) -> list:
    if grads is None:
        grads = [p.grad for p in params]
    grads = list(grads)
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter is required")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise MissingGrad(f"parameter {p.name or i} has no gradient; run backward first")
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    return grads


@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def sgd_step(params: Sequence[Tensor], grads=None, lr: float = 0.01, momentum: float = 0.0, state: Optional[OptimizerState] = None) -> OptimizerState:
    """``v <- momentum * v + g``; ``param <- param - lr * v``."""
    grads = _grads_for(params, grads)
    state = state if state is not None else OptimizerState()
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.m):
        if momentum:
            v *= momentum
            v += g
            step = v
        else:
            step = g
        p.data -= p.dtype.type(lr) * step.astype(p.dtype, copy=False)
    state.step += 1
    return state


def adam_step(
    params: Sequence[Tensor],
    grads=None,
    state: Optional[OptimizerState] = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """Bias-corrected Adam."""
    grads = _grads_for(params, grads)
    state = state if state is not None else OptimizerState()
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return state


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.state = OptimizerState()

    def step(self) -> None:
        sgd_step(self.params, None, self.lr, self.momentum, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState()

    def step(self) -> None:
        adam_step(self.params, None, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(t: float, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2`` for ``0 <= t <= total``."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= t <= total:
        raise ValueError(f"t must lie in [0, {total}], got {t}")
    if t == total:
        return float(lr_min)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int, mode: str = "max"):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        if mode not in ("max", "min"):
            raise ValueError("mode must be 'max' or 'min'")
        self.patience = patience
        self.mode = mode
        self.best: Optional[float] = None
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record one epoch's metric; return True when training should stop."""
        improved = self.best is None or (value > self.best if self.mode == "max" else value < self.best)
        if improved:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def early_stop(history: Sequence[float], patience: int, mode: str = "max") -> Optional[int]:
    """1-based epoch at which training stops for ``history``, or None if it never does."""
    stopper = EarlyStopping(patience, mode)
    for epoch, value in enumerate(history, start=1):
        if stopper.update(value):
            return epoch
    return None
