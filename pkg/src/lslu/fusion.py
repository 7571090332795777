"""Inference-time reparameterization: conv+BN fusion, 1x1 merging, theta folding."""
from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ChannelMismatch, GeometryUnsupported, ModeError, UnpopulatedStats
from .layers import BatchNorm2d, BatchNormState, Conv2d, Dropout
from .networks import LayerGraph, ResidualBegin, ResidualEnd
from .series import LSLU, BlendedActivation, SeriesActivationParams
from .tensor import Tensor

TOLERANCE = {np.dtype(np.float32): 1e-5, np.dtype(np.float64): 1e-10}


class FusedConv(Conv2d):
    """A convolution produced by a fusion step; ``provenance`` names its sources."""

    kind = "fused_conv"

    def __init__(self, weight, bias, stride=1, pad=0, provenance=(), name=None):
        weight = np.asarray(weight)
        c_out, c_in, k, _ = weight.shape
        super().__init__(
            c_in, c_out, k, stride=stride, pad=pad, bias=True, dtype=weight.dtype,
            name=name, weight=weight, bias_value=bias,
        )
        self.provenance = tuple(provenance)


def _as_conv_parts(conv: Conv2d):
    return conv.weight.data, conv.bias.data


def _provenance(node) -> tuple:
    return getattr(node, "provenance", ()) or (node.name,)


def fuse_conv_bn(conv: Conv2d, bn) -> FusedConv:
    """Fold eval-mode batch norm into the preceding convolution.

    ``W'_i = gamma_i / sqrt(var_i + eps) * W_i`` and
    ``B'_i = (B_i - mu_i) * gamma_i / sqrt(var_i + eps) + beta_i`` per output channel.
    """
    state: BatchNormState = bn.state if isinstance(bn, BatchNorm2d) else bn
    name = bn.name if isinstance(bn, BatchNorm2d) else "bn"
    if state.channels != conv.c_out:
        raise ChannelMismatch(f"conv has {conv.c_out} output channels, BN has {state.channels}")
    if state.num_batches_tracked < 1:
        raise UnpopulatedStats(f"{name}: running statistics were never populated")
    W, B = _as_conv_parts(conv)
    dtype = W.dtype
    scale = state.gamma.data.astype(np.float64) / np.sqrt(state.running_var.astype(np.float64) + state.eps)
    W_f = (W.astype(np.float64) * scale[:, None, None, None]).astype(dtype)
    B_f = ((B.astype(np.float64) - state.running_mean) * scale + state.beta.data).astype(dtype)
    return FusedConv(W_f, B_f, conv.stride, conv.pad, _provenance(conv) + (name,), name=conv.name)


def merge_1x1_convs(c1: Conv2d, c2: Conv2d) -> FusedConv:
    """Compose two 1x1 convolutions with nothing nonlinear in between."""
    for c in (c1, c2):
        if c.k != 1 or c.stride != 1 or c.pad != 0:
            raise GeometryUnsupported(f"{c.name}: merging needs 1x1 kernels with stride 1 and no padding")
    if c1.c_out != c2.c_in:
        raise ChannelMismatch(f"{c1.name} emits {c1.c_out} channels, {c2.name} expects {c2.c_in}")
    W1, B1 = (a.astype(np.float64) for a in _as_conv_parts(c1))
    W2, B2 = (a.astype(np.float64) for a in _as_conv_parts(c2))
    W1m, W2m = W1[:, :, 0, 0], W2[:, :, 0, 0]
    dtype = c1.weight.dtype
    W = (W2m @ W1m)[:, :, None, None].astype(dtype)
    B = (W2m @ B1 + B2).astype(dtype)
    return FusedConv(W, B, 1, 0, _provenance(c1) + _provenance(c2), name=c1.name)


@dataclass
class FoldResult:
    conv: Conv2d
    params: SeriesActivationParams
    folded: bool
    reason: str = ""


def fold_theta(conv: Conv2d, p: SeriesActivationParams) -> FoldResult:
    """Move a shared positive theta into the preceding convolution.

    Exact only when every term shares one theta > 0, all shifts are zero and the
    base activation is positively homogeneous (ReLU / LeakyReLU):
    ``theta * alpha * f(Wx + B) = alpha * f(theta*W x + theta*B)``.
    Anything else is returned untouched with ``folded=False`` and a reason.
    """
    if p.n_terms == 0:
        return FoldResult(conv, p, False, "no series terms")
    theta = p.theta.data
    if not np.all(theta == theta[0]):
        return FoldResult(conv, p, False, "theta differs between terms")
    if not p.base.positively_homogeneous:
        return FoldResult(conv, p, False, f"base activation {p.base} is not positively homogeneous")
    if np.any(p.bias.data != 0):
        return FoldResult(conv, p, False, "series shifts are nonzero")
    t = float(theta[0])
    if t <= 0:
        return FoldResult(conv, p, False, "theta is not positive")
    if t == 1.0:
        return FoldResult(conv, p, False, "theta is already 1 (no-op)")
    W, B = _as_conv_parts(conv)
    dtype = W.dtype
    fused = FusedConv(
        (W.astype(np.float64) * t).astype(dtype),
        (B.astype(np.float64) * t).astype(dtype),
        conv.stride, conv.pad, _provenance(conv) + ("theta",), name=conv.name,
    )
    new_p = SeriesActivationParams(
        n_terms=p.n_terms,
        base=p.base,
        theta=Tensor(np.ones_like(theta), requires_grad=True),
        omega=Tensor(p.omega.data.copy(), requires_grad=True),
        alpha=Tensor(p.alpha.data.copy(), requires_grad=True),
        bias=Tensor(p.bias.data.copy(), requires_grad=True),
    )
    return FoldResult(fused, new_p, True)


@dataclass
class FusionReport:
    """Per-step equivalence record: (layer id, action, max |diff| on the probe batch)."""

    dtype: np.dtype
    rows: list = field(default_factory=list)
    not_foldable: list = field(default_factory=list)
    network_max_abs_diff: float = 0.0
    argmax_preserved: bool = True

    @property
    def tolerance(self) -> float:
        return TOLERANCE[np.dtype(self.dtype)]

    @property
    def max_abs_diff(self) -> float:
        return max([self.network_max_abs_diff] + [r[2] for r in self.rows])

    @property
    def ok(self) -> bool:
        return self.max_abs_diff < self.tolerance

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "action", "max_abs_diff"])
        for layer, action, diff in self.rows:
            w.writerow([layer, action, repr(float(diff))])
        w.writerow(["network", "end_to_end", repr(float(self.network_max_abs_diff))])
        for layer, reason in self.not_foldable:
            w.writerow([layer, f"not_foldable: {reason}", ""])
        return buf.getvalue()


def _run(nodes, x: Tensor) -> np.ndarray:
    with T.no_grad():
        for node in nodes:
            x = node(x)
    return x.data


def _diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) if a.size else 0.0


def _fuse_sequence(nodes: list, inputs: Optional[dict], report: FusionReport, fold: bool) -> list:
    """Fuse a flat node list; ``inputs`` maps node name -> probe input array."""

    def probe(name):
        return None if inputs is None else inputs.get(name)

    out: list = []
    i = 0
    # drop blended activations that reached the identity
    nodes = [n for n in nodes if not (isinstance(n, BlendedActivation) and n.is_identity)]
    while i < len(nodes):
        node = nodes[i]
        nxt = nodes[i + 1] if i + 1 < len(nodes) else None
        if isinstance(node, Conv2d) and isinstance(nxt, BatchNorm2d):
            fused = fuse_conv_bn(node, nxt)
            x = probe(node.name)
            diff = _diff(_run([node, nxt], Tensor(x)), _run([fused], Tensor(x))) if x is not None else 0.0
            report.rows.append((node.name, f"fuse_conv_bn({nxt.name})", diff))
            out.append(fused)
            i += 2
            continue
        out.append(node)
        i += 1

    merged: list = []
    for node in out:
        prev = merged[-1] if merged else None
        if (
            isinstance(prev, Conv2d)
            and isinstance(node, Conv2d)
            and all(c.k == 1 and c.stride == 1 and c.pad == 0 for c in (prev, node))
            and prev.c_out == node.c_in
        ):
            m = merge_1x1_convs(prev, node)
            x = probe(_first_source(prev))
            if x is not None:
                diff = _diff(_run([prev, node], Tensor(x)), _run([m], Tensor(x)))
            else:
                diff = 0.0
            report.rows.append((prev.name, f"merge_1x1({node.name})", diff))
            merged[-1] = m
            continue
        merged.append(node)

    if not fold:
        return merged
    final: list = []
    for node in merged:
        prev = final[-1] if final else None
        if isinstance(node, LSLU) and isinstance(prev, Conv2d) and node.n_terms:
            res = fold_theta(prev, node.p)
            if res.folded:
                new_act = LSLU(params=res.params, name=node.name)
                x = probe(_first_source(prev))
                diff = 0.0
                if x is not None:
                    diff = _diff(_run([prev, node], Tensor(x)), _run([res.conv, new_act], Tensor(x)))
                report.rows.append((prev.name, f"fold_theta({node.name})", diff))
                final[-1] = res.conv
                final.append(new_act)
                continue
            if res.reason and "no-op" not in res.reason:
                report.not_foldable.append((node.name, res.reason))
        final.append(node)
    return final


def _first_source(conv) -> str:
    return conv.provenance[0] if isinstance(conv, FusedConv) and conv.provenance else conv.name


def fuse_network(
    g: LayerGraph,
    probe: Optional[np.ndarray] = None,
    fold: bool = True,
) -> tuple:
    """Return ``(fused_graph, report)``; the input graph is left untouched.

    The graph must be in eval mode.  When ``probe`` (a batch of inputs) is
    given, each fusion step and the whole network are compared on it.
    """
    if g.training:
        raise ModeError("fuse_network needs an eval-mode graph")
    work = copy.deepcopy(g)
    dtype = g.dtype
    report = FusionReport(np.dtype(dtype))
    inputs = None
    if probe is not None:
        inputs = {}
        with T.no_grad():
            g.forward(Tensor(probe, dtype=dtype), capture=inputs)

    # residual blocks stay intact; fusion runs on each stretch between markers
    new_nodes: list = []
    segment: list = []

    def flush():
        if segment:
            new_nodes.extend(_fuse_sequence(segment, inputs, report, fold))
            segment.clear()

    for node in work.nodes:
        if isinstance(node, (ResidualBegin, ResidualEnd)):
            flush()
            if isinstance(node, ResidualEnd) and node.shortcut:
                sc_inputs = None
                if inputs is not None:
                    sc_inputs = {node.shortcut[0].name: inputs[node.name + ".skip"]}
                node.shortcut = _fuse_sequence(node.shortcut, sc_inputs, report, fold=False)
            new_nodes.append(node)
        elif isinstance(node, Dropout):
            flush()
            new_nodes.append(node)
        else:
            segment.append(node)
    flush()

    fused = LayerGraph(new_nodes, g.input_shape, g.meta)
    fused.meta["fused"] = True
    fused.eval()
    if probe is not None:
        with T.no_grad():
            a = g.forward(Tensor(probe, dtype=dtype)).data
            b = fused.forward(Tensor(probe, dtype=dtype)).data
        report.network_max_abs_diff = _diff(a, b)
        if a.ndim == 2:
            report.argmax_preserved = bool(np.array_equal(a.argmax(axis=1), b.argmax(axis=1)))
    return fused, report
