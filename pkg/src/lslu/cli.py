"""Command line entry point: ``lslu <command> [flags]``.

Commands: train, eval, fuse, gradcheck, ablate, bench, selectivity.  Flags
override values from ``--config``.  Data files go to ``--out`` (CSV or the
checkpoint format), summaries to stdout and diagnostics to stderr.  The exit
code is 0 only when the command succeeded and every hard tolerance held.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import (
    TRAJECTORY_HEADER,
    ablate_n,
    class_selectivity,
    latency_bench,
    write_ablation_csv,
    write_selectivity_csv,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import LSLUError
from .estimator import LSLUClassifier, load_split
from .fusion import fuse_network
from .gradcheck import gradcheck_graph

log = logging.getLogger("lslu")

METRICS_HEADER = ("epoch", "train_loss", "val_acc", "lr")
CHECKPOINT_NAME = "checkpoint.lslu"

# flag name -> config key
_OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "dtype": "dtype",
    "dataset": "dataset",
    "data_dir": "data_dir",
    "arch": "arch",
    "n": "n_terms",
    "base": "base",
    "insertion": "insertion",
    "dropout": "dropout",
    "epochs": "epochs",
    "batch": "batch_size",
    "lr": "lr",
    "patience": "patience",
    "width": "width",
    "depth": "depth",
    "head": "head",
    "train_subset": "train_subset",
    "test_subset": "test_subset",
    "run_id": "run_id",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default runs/<run_id>)")
    p.add_argument("--dtype", choices=["f32", "f64"])
    p.add_argument("--dataset", choices=["cifar10", "mnist", "folder", "synthetic"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--arch", choices=["mini-vanillanet", "mini-resnet"])
    p.add_argument("--n", type=int, help="series terms per activation (0 = plain base)")
    p.add_argument("--base", choices=["relu", "leakyrelu", "gelu", "silu"])
    p.add_argument("--insertion", choices=["full", "downsampling"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--head", choices=["gap", "flatten"])
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.add_argument("--test-subset", dest="test_subset", type=int)
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lslu", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes checkpoint, metrics and trajectories")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fused", action="store_true", help="evaluate the reparameterized graph")

    p = sub.add_parser("fuse", help="fuse a checkpoint and verify equivalence on random probes")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--no-fold", dest="fold", action="store_false")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient (float64)")
    _common(p)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--input-size", dest="input_size", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--max-elems", dest="max_elems", type=int)

    p = sub.add_parser("ablate", help="train one model per term count; writes ablation.csv")
    _common(p)
    p.add_argument("--n-values", dest="n_values", default="0,1,2,3,4")
    p.add_argument("--latency-iters", dest="latency_iters", type=int, default=20)

    p = sub.add_parser("bench", help="single-threaded forward latency")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch-size", dest="bench_batch", type=int, default=1)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fused", dest="variant", action="store_const", const="fused")
    g.add_argument("--unfused", dest="variant", action="store_const", const="unfused")

    p = sub.add_parser("selectivity", help="class selectivity of activation layers")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", default="all")
    p.add_argument("--bins", type=int, default=50)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {key: getattr(args, flag, None) for flag, key in _OVERRIDES.items()}
    cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    train, test = load_split(cfg)
    log.info("train %d samples, test %d samples, shape %s", len(train), len(test), train.shape)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    metrics_path, traj_path = out / "metrics.csv", out / "trajectories.csv"
    _write_rows(metrics_path, METRICS_HEADER, [])
    _write_rows(traj_path, TRAJECTORY_HEADER, [])
    logged = 0

    def on_epoch(clf, epoch, row):
        nonlocal logged
        records = clf.trajectories_[logged:]
        logged = len(clf.trajectories_)
        with traj_path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(r.row() for r in records)
        if row is not None:
            with metrics_path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [row["epoch"], repr(row["train_loss"]), repr(row["val_acc"]), repr(row["lr"])]
                )
            log.info("epoch %d  loss %.4f  val_acc %.4f  lr %.2e", row["epoch"], row["train_loss"], row["val_acc"], row["lr"])

    clf = LSLUClassifier.from_config(cfg)
    clf.fit(train.images, train.labels, test.images, test.labels, epoch_callback=on_epoch, run_id=cfg.run_id)
    save_checkpoint(out / CHECKPOINT_NAME, clf.checkpoint_tensors(), clf.checkpoint_meta(config=cfg.to_dict()))
    result = clf.evaluate(test.images, test.labels)
    print(json.dumps({"run_id": cfg.run_id, "epochs": len(clf.history_), "test_top1": result["top1"], "out": str(out)}))
    return 0


def _load_classifier(path) -> tuple:
    ckpt = load_checkpoint(path)
    clf = LSLUClassifier.from_checkpoint(ckpt)
    cfg = RunConfig.from_dict(ckpt.meta["config"]) if "config" in ckpt.meta else None
    return clf, cfg


def cmd_eval(cfg: RunConfig, args) -> int:
    clf, saved = _load_classifier(args.checkpoint)
    data_cfg = (saved or cfg).replace(dataset=args.dataset, data_dir=args.data_dir, test_subset=args.test_subset)
    _, test = load_split(data_cfg)
    if args.fused:
        clf.graph_, report = fuse_network(clf.graph_)
    result = clf.evaluate(test.images, test.labels)
    result["per_class"] = {str(k): v for k, v in result["per_class"].items()}
    result["fused"] = bool(args.fused)
    print(json.dumps(result, sort_keys=True))
    return 0


def _graph_for(cfg: RunConfig, checkpoint) -> tuple:
    """(eval-mode graph, source) from a checkpoint, or a freshly built one."""
    if checkpoint:
        clf, _ = _load_classifier(checkpoint)
        return clf.graph_, str(checkpoint)
    train, _ = load_split(cfg)
    clf = LSLUClassifier.from_config(cfg)
    g = clf.build_graph(train.shape, train.n_classes, np.random.default_rng(cfg.seeds()["init"]))
    # populate batch-norm statistics with one train-mode pass so fusion is meaningful
    g.train()
    with T.no_grad():
        g.forward(T.Tensor(train.images[: min(len(train), 64)], dtype=g.dtype), np.random.default_rng(cfg.seed))
    return g.eval(), "fresh"


def cmd_fuse(cfg: RunConfig, args) -> int:
    g, source = _graph_for(cfg, args.checkpoint)
    probe = np.random.default_rng(cfg.seed).standard_normal((args.probes,) + tuple(g.input_shape)).astype(g.dtype)
    fused, report = fuse_network(g, probe=probe, fold=args.fold)
    out = _out_dir(cfg)
    (out / "fusion.csv").write_text(report.to_csv())
    n_before, n_after = g.node_count(), fused.node_count()
    summary = {
        "source": source,
        "dtype": str(g.dtype),
        "nodes_before": n_before,
        "nodes_after": n_after,
        "max_abs_diff": report.max_abs_diff,
        "tolerance": report.tolerance,
        "argmax_preserved": report.argmax_preserved,
        "not_foldable": [layer for layer, _ in report.not_foldable],
        "ok": report.ok and report.argmax_preserved,
    }
    print(json.dumps(summary))
    if not summary["ok"]:
        log.error("fusion exceeded tolerance %.0e (max |diff| %.3e)", report.tolerance, report.max_abs_diff)
        return 1
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    clf = LSLUClassifier.from_config(cfg.replace(dtype="float64"))
    g = clf.build_graph((cfg.synthetic_channels, args.input_size, args.input_size), args.classes,
                        np.random.default_rng(cfg.seeds()["init"]))
    report = gradcheck_graph(g, n_samples=args.samples, n_classes=args.classes, loss=cfg.loss, h=args.h,
                             seed=cfg.seed, max_elems=args.max_elems)
    out = _out_dir(cfg)
    report.to_csv(out / "gradcheck.csv")
    print(report.format_table())
    log.info("kink margin %.2e after %d draw(s)", report.margin, report.draws)
    for row in report.failures():
        log.error("FAIL %s %s: rel err %.3e >= %.0e", row.scope, row.group, row.rel_err, row.tol)
    return 0 if report.ok else 1


def cmd_ablate(cfg: RunConfig, args) -> int:
    n_values = [int(v) for v in args.n_values.split(",") if v.strip()]
    rows = ablate_n(cfg, n_values, latency_iters=args.latency_iters)
    out = _out_dir(cfg)
    write_ablation_csv(out / "ablation.csv", rows)
    for r in rows:
        print(json.dumps(r))
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    g, source = _graph_for(cfg, args.checkpoint)
    variants = [args.variant] if args.variant else ["unfused", "fused"]
    rows = []
    for variant in variants:
        graph = fuse_network(g)[0] if variant == "fused" else g
        mean_ms, std_ms = latency_bench(graph, args.bench_batch, args.iters, args.warmup, cfg.seed)
        rows.append([variant, args.bench_batch, args.iters, repr(mean_ms), repr(std_ms)])
        print(json.dumps({"variant": variant, "batch": args.bench_batch, "mean_ms": mean_ms, "std_ms": std_ms}))
    _write_rows(_out_dir(cfg) / "bench.csv", ("variant", "batch", "iters", "mean_ms", "std_ms"), rows)
    return 0


def cmd_selectivity(cfg: RunConfig, args) -> int:
    clf, saved = _load_classifier(args.checkpoint)
    data_cfg = (saved or cfg).replace(dataset=args.dataset, data_dir=args.data_dir, test_subset=args.test_subset)
    _, test = load_split(data_cfg)
    images = clf._prepare(test.images)
    g = clf.graph_
    names = [n.name for n in g.activation_layers()] if args.layer == "all" else args.layer.split(",")
    reports = [class_selectivity(g, images, test.labels, name, bins=args.bins) for name in names]
    out = _out_dir(cfg)
    write_selectivity_csv(out / "selectivity.csv", reports)
    hist_rows = []
    for rep in reports:
        for lo, hi, count in zip(rep.bin_edges[:-1], rep.bin_edges[1:], rep.hist):
            hist_rows.append([rep.layer, repr(float(lo)), repr(float(hi)), int(count)])
    _write_rows(out / "selectivity_hist.csv", ("layer", "bin_lo", "bin_hi", "count"), hist_rows)
    for rep in reports:
        print(json.dumps({"layer": rep.layer, "filters": len(rep.indices), "mean_csi": float(np.mean(rep.indices))}))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        handlers = {
            "train": lambda: cmd_train(cfg),
            "eval": lambda: cmd_eval(cfg, args),
            "fuse": lambda: cmd_fuse(cfg, args),
            "gradcheck": lambda: cmd_gradcheck(cfg, args),
            "ablate": lambda: cmd_ablate(cfg, args),
            "bench": lambda: cmd_bench(cfg, args),
            "selectivity": lambda: cmd_selectivity(cfg, args),
        }
        return handlers[args.command]()
    except (LSLUError, ValueError, OSError, KeyError) as exc:
        print(f"lslu {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
