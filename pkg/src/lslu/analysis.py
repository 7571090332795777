"""Measurement tools: parameter trajectories, convergence statistics,
class selectivity, latency and the term-count ablation."""
from __future__ import annotations

import csv
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .errors import InsufficientHistory, InsufficientIters, ModeError, NoLSLULayers, SingleClass
from .networks import LayerGraph
from .series import PARAM_KINDS
from .tensor import Tensor

TRAJECTORY_HEADER = ("run_id", "epoch", "layer", "kind", "term", "value")
SELECTIVITY_HEADER = ("layer", "filter", "csi")
ABLATION_HEADER = ("n", "params", "flops", "acc", "latency_ms")
CSI_EPS = 1e-12
HIST_BINS = 50


@dataclass(frozen=True)
class TrajectoryRecord:
    run_id: str
    epoch: int
    layer: str
    kind: str
    term: int
    value: float

    def row(self) -> tuple:
        return (self.run_id, self.epoch, self.layer, self.kind, self.term, repr(float(self.value)))


def record_trajectories(g: LayerGraph, epoch: int, run_id: str = "run") -> list:
    """One record per series-activation scalar (4N per layer) at ``epoch``."""
    layers = g.lslu_layers()
    if not layers:
        raise NoLSLULayers("graph has no series activation layers")
    records = []
    for layer in layers:
        for kind in PARAM_KINDS:
            values = getattr(layer.p, kind).data
            for n, v in enumerate(values.tolist()):
                records.append(TrajectoryRecord(run_id, epoch, layer.name, kind, n + 1, v))
    return records


class TrajectoryLogger:
    """Append-only CSV writer for trajectory records."""

    def __init__(self, path, run_id: str = "run"):
        self.path = Path(path)
        self.run_id = run_id
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(TRAJECTORY_HEADER)

    def log(self, g: LayerGraph, epoch: int) -> list:
        records = record_trajectories(g, epoch, self.run_id)
        self.append(records)
        return records

    def append(self, records: Iterable[TrajectoryRecord]) -> None:
        with self.path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for r in records:
                w.writerow(r.row())


def read_trajectories(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            TrajectoryRecord(r["run_id"], int(r["epoch"]), r["layer"], r["kind"], int(r["term"]), float(r["value"]))
            for r in reader
        ]


def convergence_stats(records: Sequence[TrajectoryRecord], last_k: int = 10) -> dict:
    """Mean and population std over the final ``last_k`` epochs, per (layer, kind, term)."""
    series = defaultdict(dict)
    for r in records:
        series[(r.layer, r.kind, r.term)][r.epoch] = r.value
    out = {}
    for key, by_epoch in series.items():
        if len(by_epoch) < last_k:
            raise InsufficientHistory(f"{key}: {len(by_epoch)} epochs recorded, need {last_k}")
        values = np.array([by_epoch[e] for e in sorted(by_epoch)[-last_k:]], dtype=np.float64)
        out[key] = (float(values.mean()), float(values.std()))
    return out


def average_runs(records: Sequence[TrajectoryRecord]) -> list:
    """Average repeated runs: one record per (epoch, layer, kind, term) with run_id 'mean'."""
    acc = defaultdict(list)
    for r in records:
        acc[(r.epoch, r.layer, r.kind, r.term)].append(r.value)
    return [TrajectoryRecord("mean", e, layer, kind, term, float(np.mean(v))) for (e, layer, kind, term), v in sorted(acc.items())]


# ---------------------------------------------------------------------------
# Class selectivity
# ---------------------------------------------------------------------------


@dataclass
class SelectivityReport:
    layer: str
    indices: np.ndarray
    hist: np.ndarray
    bin_edges: np.ndarray

    def rows(self) -> list:
        return [(self.layer, i, repr(float(v))) for i, v in enumerate(self.indices)]


def selectivity_index(class_means: np.ndarray, eps: float = CSI_EPS) -> np.ndarray:
    """Class selectivity per filter from a ``(K, F)`` matrix of class-conditioned means.

    ``(mu_max - mu_rest) / (mu_max + mu_rest + eps)`` where ``mu_rest`` is the
    mean over the other classes.  Negative means are rectified to 0 first and
    the result is clamped to [0, 1].
    """
    mu = np.maximum(np.asarray(class_means, dtype=np.float64), 0.0)
    if mu.ndim == 1:
        mu = mu[:, None]
    k = mu.shape[0]
    if k < 2:
        raise SingleClass("selectivity needs at least two classes")
    top = mu.max(axis=0)
    rest = (mu.sum(axis=0) - top) / (k - 1)
    csi = (top - rest) / (top + rest + eps)
    # equal means give exactly 0, not a rounding residue of the mean
    csi[np.all(mu == top, axis=0)] = 0.0
    return np.clip(csi, 0.0, 1.0)


def layer_activations(g: LayerGraph, images: np.ndarray, layer: str, batch_size: int = 256) -> np.ndarray:
    """Spatially averaged output of node ``layer``: ``(N, C)``."""
    target = g[layer]
    outs = []
    for start in range(0, len(images), batch_size):
        chunk = Tensor(images[start : start + batch_size], dtype=g.dtype)
        capture: dict = {}
        with T.no_grad():
            g.forward(chunk, capture=capture)
            act = target(Tensor(capture[layer])).data
        outs.append(act.mean(axis=(2, 3)) if act.ndim == 4 else act)
    return np.concatenate(outs)


def class_selectivity(g: LayerGraph, images: np.ndarray, labels: np.ndarray, layer: str, bins: int = HIST_BINS) -> SelectivityReport:
    """Per-filter selectivity of ``layer``'s post-activation output over a labelled set."""
    if g.training:
        raise ModeError("class selectivity needs an eval-mode graph")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise SingleClass("dataset contains a single class")
    acts = layer_activations(g, images, layer)
    means = np.stack([acts[labels == k].mean(axis=0) for k in classes])
    csi = selectivity_index(means)
    hist, edges = np.histogram(csi, bins=bins, range=(0.0, 1.0))
    return SelectivityReport(layer, csi, hist, edges)


def write_selectivity_csv(path, reports: Sequence[SelectivityReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SELECTIVITY_HEADER)
        for rep in reports:
            w.writerows(rep.rows())


def write_histogram_dat(path, report: SelectivityReport) -> None:
    """gnuplot-friendly ``bin_center count density`` columns."""
    centers = 0.5 * (report.bin_edges[:-1] + report.bin_edges[1:])
    width = report.bin_edges[1] - report.bin_edges[0]
    total = max(report.hist.sum(), 1)
    with Path(path).open("w") as fh:
        fh.write(f"# layer {report.layer}\n# bin_center count density\n")
        for c, n in zip(centers, report.hist):
            fh.write(f"{c:.4f} {int(n)} {n / (total * width):.6f}\n")


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


def latency_bench(g: LayerGraph, batch: int = 1, iters: int = 100, warmup: int = 10, seed: int = 0) -> tuple:
    """Mean and std wall-clock milliseconds per forward pass, single-threaded."""
    if g.training:
        raise ModeError("latency benchmark needs an eval-mode graph")
    if iters < 1:
        raise InsufficientIters("iters must be >= 1")
    if g.input_shape is None:
        raise ValueError("graph has no input_shape")
    x = Tensor(np.random.default_rng(seed).standard_normal((batch,) + g.input_shape), dtype=g.dtype)
    times = []
    with threadpool_limits(limits=1), T.no_grad():
        for _ in range(warmup):
            g.forward(x)
        for _ in range(iters):
            t0 = time.perf_counter()
            g.forward(x)
            times.append((time.perf_counter() - t0) * 1e3)
    times = np.array(times)
    return float(times.mean()), float(times.std())


# ---------------------------------------------------------------------------
# Ablation over the number of series terms
# ---------------------------------------------------------------------------


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["n"], r["params"], r["flops"], repr(float(r["acc"])), repr(float(r["latency_ms"]))])


def ablate_n(config, n_values=(0, 1, 2, 3, 4), train=None, test=None, latency_iters: int = 20) -> list:
    """Train one model per term count with identical seeds and schedule.

    ``config`` is a :class:`~lslu.config.RunConfig`; ``train``/``test`` default
    to the datasets it names.  Returns rows with the ablation CSV columns.
    """
    from .estimator import LSLUClassifier, load_split
    from .networks import count_params_flops

    if train is None or test is None:
        train, test = load_split(config)
    rows = []
    for n in n_values:
        cfg = config.replace(n_terms=int(n))
        clf = LSLUClassifier.from_config(cfg)
        clf.fit(train.images, train.labels)
        params, flops = count_params_flops(clf.graph_)
        acc = clf.score(test.images, test.labels)
        mean_ms, _ = latency_bench(clf.graph_, iters=latency_iters, warmup=2)
        rows.append({"n": int(n), "params": params, "flops": flops, "acc": acc, "latency_ms": mean_ms})
    return rows
