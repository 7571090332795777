"""Finite-difference verification of every backward rule in a layer graph.

Two scopes are checked:

``layer``
    each node on its own.  The node's input is captured from a train-mode
    forward pass and its output is contracted with a fixed random readout, so
    the analytic gradient of every parameter (and of the input) can be compared
    with central differences of that scalar.  Parameter-free nodes are checked
    on a fresh random input of the same shape, which has no tied pool windows.
``network``
    the full training loss with respect to every parameter tensor.

The error of a group is normwise: ``max|a - n| / max(max|a|, max|n|, floor)``.
At network scope ``floor`` is ``NETWORK_FLOOR``, so groups whose gradient
vanishes identically (offsets feeding a batch norm) are compared in absolute
terms instead of as a ratio of two rounding residues.
"""
from __future__ import annotations

import copy
import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Layer, loss as loss_fn
from .networks import LayerGraph, ResidualBegin, ResidualEnd
from .tensor import Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
TIGHT_TOL = 1e-6
TIGHT_KINDS = ("theta", "omega")
NETWORK_FLOOR = 1e-6
MARGIN_FACTOR = 20.0

REPORT_HEADER = ("scope", "group", "kind", "max_abs_err", "rel_err", "tol", "passed")


@dataclass
class GradCheckRow:
    scope: str
    group: str
    kind: str
    max_abs_err: float
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_err < self.tol)


@dataclass
class GradCheckReport:
    rows: list = field(default_factory=list)
    h: float = DEFAULT_H
    margin: float = float("inf")
    draws: int = 1

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> list:
        return [r for r in self.rows if not r.passed]

    def worst(self, kinds=None, scope=None) -> float:
        errs = [r.rel_err for r in self.rows if (kinds is None or r.kind in kinds) and (scope is None or r.scope == scope)]
        return max(errs) if errs else 0.0

    def format_table(self) -> str:
        lines = [f"{'scope':<8}{'group':<32}{'rel_err':>12}{'tol':>10}  result"]
        for r in self.rows:
            lines.append(f"{r.scope:<8}{r.group:<32}{r.rel_err:>12.3e}{r.tol:>10.0e}  {'pass' if r.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.scope, r.group, r.kind, repr(r.max_abs_err), repr(r.rel_err), repr(r.tol), int(r.passed)])


def tolerance_for(kind: str) -> float:
    return TIGHT_TOL if kind in TIGHT_KINDS else DEFAULT_TOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> tuple:
    """(max abs error, normwise relative error)."""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return diff, diff / scale


def _fd(fn, arr: np.ndarray, h: float, idx: Optional[np.ndarray]) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (modified in place, then restored)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size) if idx is None else idx:
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out.reshape(arr.shape)


def _subset(size: int, max_elems: Optional[int], rng: np.random.Generator) -> Optional[np.ndarray]:
    if max_elems is None or size <= max_elems:
        return None
    return np.sort(rng.choice(size, max_elems, replace=False))


def _compare(scope, group, kind, analytic, numeric, idx, floor, tol=None) -> GradCheckRow:
    if analytic is None:
        # never reached by backward: the analytic gradient is zero
        analytic = np.zeros_like(numeric)
    if idx is not None:
        analytic, numeric = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
    abs_err, rel = rel_error(analytic, numeric, floor)
    return GradCheckRow(scope, group, kind, abs_err, rel, tolerance_for(kind) if tol is None else tol)


def _stable_seed(seed: int, name: str) -> int:
    return seed * 1_000_003 + zlib.crc32(name.encode())


def _node_inputs(g: LayerGraph, x: np.ndarray, rng_factory) -> dict:
    """Input array of every node, including shortcut nodes nested in residual ends."""
    capture: dict = {}
    with T.no_grad():
        g.forward(Tensor(x), rng_factory(), capture=capture)
        for node in g.nodes:
            if isinstance(node, ResidualEnd):
                z = Tensor(capture[node.name + ".skip"])
                for sub in node.shortcut:
                    capture[sub.name] = z.data
                    z = sub(z, rng_factory())
    return capture


def check_node(node: Layer, x: np.ndarray, h: float = DEFAULT_H, seed: int = 0, rng_factory=None, max_elems=None) -> list:
    """Layer-scope rows for one node evaluated at input ``x`` (float64)."""
    rng_factory = rng_factory or (lambda: np.random.default_rng(seed))
    rng = np.random.default_rng(_stable_seed(seed, node.name))
    params = node.params()
    if not params:
        # parameter-free: continuous random input, redrawn until clear of kinks
        for _ in range(50):
            x = rng.standard_normal(x.shape)
            if node.kink_margin(x) > MARGIN_FACTOR * h:
                break
    x = np.array(x, dtype=np.float64)
    with T.no_grad():
        out_shape = node(Tensor(x), rng_factory()).shape
    readout = rng.standard_normal(out_shape)

    def scalar(inp: Tensor) -> Tensor:
        return T.sum_(T.mul(node(inp, rng_factory()), Tensor(readout)))

    xin = Tensor(x, requires_grad=True)
    for t in params.values():
        t.grad = None
    scalar(xin).backward()
    rows = []
    value = lambda: scalar(Tensor(x)).item()  # noqa: E731
    with T.no_grad():
        for key, t in params.items():
            idx = _subset(t.size, max_elems, rng)
            numeric = _fd(value, t.data, h, idx)
            rows.append(_compare("layer", f"{node.name}.{key}", key, t.grad, numeric, idx, 1e-12))
            t.grad = None
        idx = _subset(x.size, max_elems, rng)
        numeric = _fd(value, x, h, idx)
        rows.append(_compare("layer", f"{node.name}.<input>", "input", xin.grad, numeric, idx, 1e-12))
    return rows


def draw_probe(g: LayerGraph, n: int, seed: int = 0, h: float = DEFAULT_H, max_tries: int = 100, rng_factory=None) -> tuple:
    """Random float64 input whose kink margin exceeds ``MARGIN_FACTOR * h``.

    Returns ``(x, margin, draws)``; if no draw qualifies the best one is returned.
    """
    rng = np.random.default_rng(seed)
    rng_factory = rng_factory or (lambda: np.random.default_rng(seed))
    best = (None, -1.0, 0)
    for attempt in range(1, max_tries + 1):
        x = rng.standard_normal((n,) + tuple(g.input_shape))
        with T.no_grad():
            margin = g.kink_margin(Tensor(x), rng_factory())
        if margin > best[1]:
            best = (x, margin, attempt)
        if margin > MARGIN_FACTOR * h:
            return x, margin, attempt
    return best


def gradcheck_graph(
    g: LayerGraph,
    n_samples: int = 2,
    n_classes: Optional[int] = None,
    loss: str = "cross_entropy",
    h: float = DEFAULT_H,
    seed: int = 0,
    layers: bool = True,
    network: bool = True,
    max_elems: Optional[int] = None,
) -> GradCheckReport:
    """Check ``g`` in float64 train mode; ``g`` itself is left untouched.

    Dropout draws from a freshly seeded generator on every call so the mask is
    the same for every perturbed evaluation.
    """
    g = copy.deepcopy(g).astype(np.float64).train()
    n_classes = n_classes or int(g.output_shape()[0])
    rng_factory = lambda: np.random.default_rng(seed + 1)  # noqa: E731
    x, margin, draws = draw_probe(g, n_samples, seed, h, rng_factory=rng_factory)
    y = np.random.default_rng(seed + 2).integers(0, n_classes, n_samples)
    report = GradCheckReport(h=h, margin=margin, draws=draws)
    sub_rng = np.random.default_rng(seed + 3)

    if layers:
        inputs = _node_inputs(g, x, rng_factory)
        for node in g.walk():
            if isinstance(node, (ResidualBegin, ResidualEnd)):
                continue
            report.rows.extend(check_node(node, inputs[node.name], h, seed, rng_factory, max_elems))
        report.rows.extend(_check_residual_ends(g, inputs, h, seed))

    if network:
        def value() -> float:
            return loss_fn(loss, g.forward(Tensor(x), rng_factory()), y).item()

        g.zero_grad()
        loss_fn(loss, g.forward(Tensor(x), rng_factory()), y).backward()
        analytic = {k: t.grad.copy() for k, t in g.named_parameters().items()}
        g.zero_grad()
        with T.no_grad():
            for key, t in g.named_parameters().items():
                idx = _subset(t.size, max_elems, sub_rng)
                numeric = _fd(value, t.data, h, idx)
                kind = key.rpartition(".")[2]
                report.rows.append(_compare("network", key, kind, analytic[key], numeric, idx, NETWORK_FLOOR, DEFAULT_TOL))
    return report


def _check_residual_ends(g: LayerGraph, inputs: dict, h: float, seed: int) -> list:
    """Input-gradient rows for the residual addition (main path and skip path)."""
    rows = []
    for node in g.nodes:
        if not isinstance(node, ResidualEnd):
            continue
        main = np.array(inputs[node.name], dtype=np.float64)
        skip = np.array(inputs[node.name + ".skip"], dtype=np.float64)
        rng = np.random.default_rng(_stable_seed(seed, node.name))
        readout = Tensor(rng.standard_normal(main.shape))

        def scalar(a: Tensor, b: Tensor) -> Tensor:
            return T.sum_(T.mul(T.add(a, node.skip(b)), readout))

        ta, tb = Tensor(main, requires_grad=True), Tensor(skip, requires_grad=True)
        scalar(ta, tb).backward()
        for sub in node.shortcut:
            for t in sub.params().values():
                t.grad = None
        with T.no_grad():
            na = _fd(lambda: scalar(Tensor(main), Tensor(skip)).item(), main, h, None)
            nb = _fd(lambda: scalar(Tensor(main), Tensor(skip)).item(), skip, h, None)
        rows.append(_compare("layer", f"{node.name}.<main>", "input", ta.grad, na, None, 1e-12))
        rows.append(_compare("layer", f"{node.name}.<skip>", "input", tb.grad, nb, None, 1e-12))
    return rows
