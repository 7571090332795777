"""Dense tensors with reverse-mode automatic differentiation.

Every primitive builds its output eagerly and attaches a backward closure that
maps the output gradient to one gradient per parent.  ``backward`` walks the
graph in reverse topological order (see :class:`GradTape`) and accumulates
into the ``grad`` buffer of each leaf that requires it.

Broadcasting is deliberately narrow: operands of a binary op must have equal
shapes, or one of them is a scalar (size 1, rank <= 1), or one of them is a
rank-1 per-channel vector matching axis 1 of an ``(N, C)`` or ``(N, C, H, W)``
operand.  Anything else needs an explicit reshape.
"""
from __future__ import annotations

import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import (
    DomainError,
    DTypeMismatch,
    InvalidAxis,
    LabelOutOfRange,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# NaN/Inf checks on every op output; off by default because they cost a full pass.
DEBUG = os.environ.get("LSLU_DEBUG", "") not in ("", "0")

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise DTypeMismatch(f"unsupported dtype {dtype}; use float32 or float64")
        return np.array(data, dtype=dtype)
    arr = np.array(data)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._consumed = False
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        if DEBUG and not np.all(np.isfinite(data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
        return out

    # -- array-like conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class no_grad:
    """Context manager that stops ops from recording backward closures."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


class GradTape:
    """Ordered record of the ops that produced ``root``.

    ``ops`` is topologically sorted: every op appears after all of its inputs.
    """

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, root: Tensor) -> "GradTape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing leaf buffers.  The intermediate graph is
    released afterwards, so a second call on the same loss raises
    :class:`TapeConsumed`.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumed("backward already ran through this graph; rebuild the forward pass")
    tape = GradTape.from_output(loss)
    if any(node._consumed for node in tape.ops):
        raise TapeConsumed("graph contains intermediates released by an earlier backward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.ops:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()
    if loss._backward is None and loss._op != "leaf":
        loss._consumed = True


def finite_diff_grad(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data, copy=True)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(np.asarray(_call(fn, base, x.dtype)).reshape(-1)[0])
        flat[i] = orig - h
        f_minus = float(np.asarray(_call(fn, base, x.dtype)).reshape(-1)[0])
        flat[i] = orig
        out.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def _call(fn, arr, dtype):
    res = fn(Tensor(arr.copy(), dtype=dtype))
    return res.data if isinstance(res, Tensor) else res


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _is_scalar(shape: tuple) -> bool:
    return len(shape) <= 1 and int(np.prod(shape)) == 1


def _is_channel(shape: tuple, target: tuple) -> bool:
    return len(shape) == 1 and len(target) in (2, 4) and shape[0] == target[1]


def _expand(arr: np.ndarray, target: tuple) -> np.ndarray:
    if arr.shape == target:
        return arr
    if _is_scalar(arr.shape):
        return arr.reshape(())
    view = (1, arr.shape[0]) + (1,) * (len(target) - 2)
    return arr.reshape(view)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes).reshape(shape)


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.dtype != b.dtype:
        raise DTypeMismatch(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a, b, sa
    if _is_scalar(sb) or _is_channel(sb, sa):
        return a, b, sa
    if _is_scalar(sa) or _is_channel(sa, sb):
        return a, b, sb
    raise ShapeMismatch(f"cannot combine shapes {sa} and {sb}; reshape explicitly")


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    ea, eb = _expand(a.data, shape), _expand(b.data, shape)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._make(ea + eb, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    ea, eb = _expand(a.data, shape), _expand(b.data, shape)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._make(ea - eb, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    ea, eb = _expand(a.data, shape), _expand(b.data, shape)

    def bw(g):
        ga = _reduce_to(g * eb, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ea, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ea * eb, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b, shape = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ea, eb = _expand(a.data, shape), _expand(b.data, shape)
    out = ea / eb

    def bw(g):
        ga = _reduce_to(g / eb, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / eb, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor._make(a.data + c, (a,), lambda g: (g,), "shift")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def ln(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("ln of non-positive value")
    x = a.data
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "ln")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return Tensor._make(np.maximum(x, x.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    s = x.dtype.type(slope)
    mask = x < 0
    out = np.where(mask, s * x, x)
    return Tensor._make(out, (a,), lambda g: (np.where(mask, s * g, g),), "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf-based normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return Tensor._make(out, (a,), bw, "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def bw(g):
        return (g * s * (1 + x * (1 - s)),)

    return Tensor._make(x * s, (a,), bw, "silu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_value_slope(name: str, x: np.ndarray, slope: float = 0.01) -> tuple:
    """``(f(x), f'(x))`` for a base activation given by name; used by fused ops."""
    if name == "relu":
        return np.maximum(x, x.dtype.type(0)), (x > 0).astype(x.dtype)
    if name == "leakyrelu":
        s = x.dtype.type(slope)
        neg = x < 0
        return np.where(neg, s * x, x), np.where(neg, s, x.dtype.type(1))
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (x * cdf).astype(x.dtype, copy=False), (cdf + x * pdf).astype(x.dtype, copy=False)
    if name == "silu":
        sg = _sigmoid(x)
        return x * sg, sg * (1 + x * (1 - sg))
    raise ValueError(f"unknown activation {name!r}")


def series_activation(x: Tensor, theta: Tensor, omega: Tensor, alpha: Tensor, bias: Tensor, name: str, slope: float = 0.01) -> Tensor:
    """Fused ``sum_n [theta_n alpha_n f(x + b_n) + omega_n]`` over rank-1 term vectors.

    Terms whose shifts are exactly equal share one evaluation of ``f``: the
    group contributes ``(sum of theta_n alpha_n) f(x + b)``, which is exact
    algebra and makes the initialized layer reproduce ``f`` bit for bit.
    Gradients: d/dtheta_n = alpha_n <g, f_n>, d/dalpha_n = theta_n <g, f_n>,
    d/db_n = theta_n alpha_n <g, f'_n>, d/domega_n = sum(g), and
    d/dx = g * sum_n theta_n alpha_n f'_n.
    """
    xd = x.data
    dt = xd.dtype
    th, al, b = theta.data.astype(dt), alpha.data.astype(dt), bias.data.astype(dt)
    coeff = th * al
    groups: dict = {}
    for n, shift_n in enumerate(b.tolist()):
        groups.setdefault(shift_n, []).append(n)
    out = None
    evals = []
    for members in groups.values():
        c = coeff[members[0]]
        for n in members[1:]:
            c = c + coeff[n]
        fz, dz = activation_value_slope(name, xd + b[members[0]], slope)
        term = fz * c
        out = term if out is None else out + term
        evals.append((members, fz, dz))
    out = out + omega.data.astype(dt).sum()

    def bw(g):
        gx = np.zeros_like(xd)
        g_th = np.zeros(th.shape, dtype=np.float64)
        g_al = np.zeros(al.shape, dtype=np.float64)
        g_b = np.zeros(b.shape, dtype=np.float64)
        for members, fz, dz in evals:
            gf = float(np.sum(g * fz, dtype=np.float64))
            gd = g * dz
            gds = float(np.sum(gd, dtype=np.float64))
            c = coeff[members].sum(dtype=dt) if len(members) > 1 else coeff[members[0]]
            gx += gd * c
            for n in members:
                g_th[n] = al[n] * gf
                g_al[n] = th[n] * gf
                g_b[n] = coeff[n] * gds
        g_om = np.full(omega.shape, float(np.sum(g, dtype=np.float64)))
        return gx, g_th.astype(dt), g_om.astype(dt), g_al.astype(dt), g_b.astype(dt)

    return Tensor._make(out, (x, theta, omega, alpha, bias), bw, "series")


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple:
    """Fused train-mode batch norm over every axis except 1.

    Returns ``(out, mean, biased_var)``; the statistics are plain arrays.
    """
    xd = x.data
    dt = xd.dtype
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    keep = (1, -1) if xd.ndim == 2 else (1, -1, 1, 1)
    count = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, dtype=dt)
    xc = xd - mu.reshape(keep)
    var = (xc * xc).mean(axis=axes, dtype=dt)
    inv = (dt.type(1) / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = xc * inv.reshape(keep)
    out = xhat * gamma.data.reshape(keep) + beta.data.reshape(keep)

    def bw(g):
        g_beta = g.sum(axis=axes)
        g_gamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.data.reshape(keep)
        s1 = dxhat.sum(axis=axes).reshape(keep)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(keep)
        gx = (inv.reshape(keep) / dt.type(count)) * (dt.type(count) * dxhat - s1 - xhat * s2)
        return gx.astype(dt, copy=False), g_gamma.astype(dt), g_beta.astype(dt)

    return Tensor._make(out, (x, gamma, beta), bw, "batchnorm"), mu, var


_UNARY = {
    "neg": neg,
    "exp": exp,
    "ln": ln,
    "tanh": tanh,
    "sqrt": sqrt,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def ew_op(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale`` and ``shift`` take their constant through ``b``.
    """
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, b)
    if kind == "shift":
        return shift(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DTypeMismatch(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ B.T if a.requires_grad else None
        gb = A.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(A @ B, (a, b), bw, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from exc
    orig = a.shape
    return Tensor._make(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise InvalidAxis(f"bad permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._make(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def getitem(a: Tensor, index) -> Tensor:
    """Basic (int / slice) indexing; the result is a copy."""
    out = np.array(a.data[index], copy=True)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return Tensor._make(out, (a,), bw, "getitem")


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise InvalidAxis(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(norm))


def reduce(kind: str, x: Tensor, axes: Optional[Iterable[int]] = None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None); reduced axes are dropped."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    out = x.data.sum(axis=axes)
    if kind == "mean":
        out = out / x.dtype.type(count)
    out = np.asarray(out, dtype=x.dtype)
    keep = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    shape = x.shape

    def bw(g):
        g = g.reshape(keep)
        if kind == "mean":
            g = g / x.dtype.type(count)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (x,), bw, kind)


def sum_(x: Tensor, axes=None) -> Tensor:
    return reduce("sum", x, axes)


def mean(x: Tensor, axes=None) -> Tensor:
    return reduce("mean", x, axes)


def concat_scalars(values: Sequence[Tensor]) -> Tensor:
    """Stack rank-0 tensors into a rank-1 tensor."""
    data = np.array([v.data for v in values], dtype=values[0].dtype).reshape(-1)

    def bw(g):
        return tuple(g[i].reshape(values[i].shape) for i in range(len(values)))

    return Tensor._make(data, tuple(values), bw, "stack")


# ---------------------------------------------------------------------------
# Convolution machinery
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_geometry(x_shape: tuple, k: int, stride: int, pad: int) -> tuple:
    if len(x_shape) != 4:
        raise ShapeMismatch(f"expected an N,C,H,W tensor, got shape {x_shape}")
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeMismatch(f"invalid kernel geometry k={k} stride={stride} pad={pad}")
    _, _, H, W = x_shape
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    return conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)


def im2col(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unroll receptive fields into columns.

    Returns a ``(C*k*k, N*H_out*W_out)`` matrix.  Row ``c*k*k + i*k + j`` holds
    kernel tap ``(i, j)`` of channel ``c``; column ``n*H_out*W_out + h*W_out + w``
    is output position ``(h, w)`` of sample ``n``.
    """
    Ho, Wo = _check_geometry(x.shape, k, stride, pad)
    N, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * k * k, N * Ho * Wo)

    def bw(g):
        return (col2im(g, x.shape, k, stride, pad),)

    return Tensor._make(cols, (x,), bw, "im2col")


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    N, C, H, W = x_shape
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    g6 = cols.reshape(C, k, k, N, Ho, Wo).transpose(3, 0, 1, 2, 4, 5)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g6[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad].copy()
    return xp


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Window maximum; backward routes to the first maximal index in row-major order."""
    stride = stride or k
    Ho, Wo = _check_geometry(x.shape, k, stride, 0)
    N, C, H, W = x.shape
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        di, dj = np.divmod(arg, k)
        rows = np.arange(Ho)[None, None, :, None] * stride + di
        cols = np.arange(Wo)[None, None, None, :] * stride + dj
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        full = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(full, (n_idx, c_idx, rows, cols), g)
        return (full,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw, "maxpool")


def avgpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or k
    Ho, Wo = _check_geometry(x.shape, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = win.mean(axis=(-2, -1)).astype(x.dtype, copy=False)
    area = x.dtype.type(k * k)

    def bw(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        share = g / area
        for i in range(k):
            for j in range(k):
                full[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += share
        return (full,)

    return Tensor._make(np.ascontiguousarray(out), (x,), bw, "avgpool")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _targets_matrix(targets, n: int, k: int, dtype) -> np.ndarray:
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ShapeMismatch(f"{t.shape[0]} labels for {n} logits rows")
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise LabelOutOfRange("labels must be integers")
            t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= k):
            raise LabelOutOfRange(f"labels must lie in [0, {k})")
        onehot = np.zeros((n, k), dtype=dtype)
        onehot[np.arange(n), t] = 1
        return onehot
    if t.shape != (n, k):
        raise ShapeMismatch(f"targets shape {t.shape} does not match logits ({n}, {k})")
    return t.astype(dtype, copy=False)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Softmax cross-entropy averaged over the batch; targets are labels or one-hot rows."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeMismatch(f"logits must be (N, K) with K >= 2, got {logits.shape}")
    n, k = logits.shape
    t = _targets_matrix(targets, n, k, logits.dtype)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = np.asarray(-(t * logp).sum() / n, dtype=z.dtype)

    def bw(g):
        p = np.exp(logp)
        return (g * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return Tensor._make(loss, (logits,), bw, "cross_entropy")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Per-class sigmoid + binary cross-entropy, averaged over batch and classes."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeMismatch(f"logits must be (N, K) with K >= 2, got {logits.shape}")
    n, k = logits.shape
    t = _targets_matrix(targets, n, k, logits.dtype)
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.sum() / (n * k), dtype=z.dtype)

    def bw(g):
        return (g * (_sigmoid(z) - t) / (n * k),)

    return Tensor._make(loss, (logits,), bw, "bce_with_logits")
