"""Acceptance suite.  Every test carries a ``criterion`` marker and prints one
PASS/FAIL line; tolerances are pinned as module constants."""
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from lslu.analysis import convergence_stats, read_trajectories, selectivity_index
from lslu.cli import main
from lslu.fusion import fuse_network
from lslu.layers import BatchNorm2d, base_activation
from lslu.networks import build_mini_resnet, build_mini_vanillanet
from lslu.series import LSLU
from lslu.tensor import Tensor, no_grad

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist-subset"

BASES = ("relu", "leakyrelu", "gelu", "silu")
C1_SECONDS = 1.0
C2_ALL_TOL, C2_TIGHT_TOL, C2_SECONDS = 1e-4, 1e-6, 120.0
C3_TOL = {np.float32: 1e-5, np.float64: 1e-10}
C3_PROBES, C3_SECONDS = 100, 30.0
C4_TOL = 1e-10
C5_MIN_ACC, C5_BASELINE_SLACK, C5_SECONDS, C5_SEEDS = 0.90, 0.01, 300.0, (0, 1, 2)
C6_STD, C6_LAST = 1e-2, 10
C9_MEAN, C9_VAR = 1e-6, 1e-4

# the desk-scale MNIST model: a two-stage mini-ResNet with every activation replaced
C5_CONFIG = {
    "dataset": "mnist",
    "data_dir": str(MNIST_DIR),
    "arch": "mini-resnet",
    "insertion": "full",
    "blocks": [1, 1],
    "width": 20,
    "stem_stride": 2,
    "head": "flatten",
    "base": "relu",
    "optimizer": "adam",
    "lr": 1e-3,
    "schedule": "cosine",
    "epochs": 10,
    "batch_size": 256,
}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.mark.criterion(1, "series activation at init equals its base activation")
def test_c1_init_identity(request):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for dtype in (np.float32, np.float64):
        x = Tensor(rng.standard_normal(10_000) * 4, dtype=dtype)
        for base in BASES:
            ref = base_activation(base, x).data
            for n in (1, 2, 3, 4):
                out = LSLU(n, base, dtype=dtype)(x).data
                assert out.dtype == ref.dtype
                worst = max(worst, float(np.max(np.abs(out - ref))))
    elapsed = time.perf_counter() - start
    request.node.criterion_detail = f"max|d|={worst:g}, {elapsed:.2f}s"
    assert worst == 0.0
    assert elapsed < C1_SECONDS


@pytest.mark.criterion(2, "gradient oracle on mini-VanillaNet(d=5) and two-stage mini-ResNet")
def test_c2_gradcheck(tmp_path, request):
    runs = {
        "vanillanet": ({"arch": "mini-vanillanet", "depth": 5, "width": 8, "synthetic_channels": 3, "dropout": 0.1}, "32"),
        "resnet": ({"arch": "mini-resnet", "blocks": [1, 1], "width": 8, "insertion": "full", "synthetic_channels": 3}, "16"),
    }
    start = time.perf_counter()
    worst_all = worst_tight = 0.0
    for name, (cfg, size) in runs.items():
        out = tmp_path / name
        code = main(["gradcheck", "--config", write_config(tmp_path / f"{name}.json", cfg), "--input-size", size,
                     "--classes", "4", "--h", "1e-5", "--out", str(out)])
        rows = read_rows(out / "gradcheck.csv")
        kinds = {r["kind"] for r in rows}
        assert {"theta", "omega", "alpha", "bias", "gamma", "beta", "weight"} <= kinds, kinds
        worst_all = max(worst_all, max(float(r["rel_err"]) for r in rows))
        tight = [float(r["rel_err"]) for r in rows if r["scope"] == "layer" and r["kind"] in ("theta", "omega")]
        worst_tight = max(worst_tight, max(tight))
        assert code == 0
    elapsed = time.perf_counter() - start
    request.node.criterion_detail = f"worst={worst_all:.1e}, theta/omega={worst_tight:.1e}, {elapsed:.0f}s"
    assert worst_all < C2_ALL_TOL
    assert worst_tight < C2_TIGHT_TOL
    assert elapsed < C2_SECONDS


def _trained_like(g, rng, shared_theta=True):
    """Non-trivial series parameters and batch-norm affine values, with running
    statistics measured on data the way a trained network has them."""
    for layer in g.lslu_layers():
        p = layer.p
        p.theta.data[:] = rng.uniform(0.5, 2.0) if shared_theta else rng.uniform(0.5, 2.0, p.n_terms)
        p.omega.data[:] = rng.standard_normal(p.n_terms) * 0.1
        p.alpha.data[:] = rng.uniform(0.1, 0.6, p.n_terms)
    norms = [node for node in g.walk() if isinstance(node, BatchNorm2d)]
    for bn in norms:
        bn.state.gamma.data[:] = rng.uniform(0.5, 1.5, bn.channels)
        bn.state.beta.data[:] = rng.standard_normal(bn.channels) * 0.2
        bn.state.momentum = 1.0
    g.train()
    with no_grad():
        g(Tensor(rng.standard_normal((256,) + g.input_shape), dtype=g.dtype))
    for bn in norms:
        bn.state.momentum = 0.1
    return g.eval()


@pytest.mark.criterion(3, "fused and unfused graphs agree on 100 random probes")
def test_c3_fusion_equivalence(request):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    details = []
    for dtype, tol in C3_TOL.items():
        graphs = {
            "vanillanet": build_mini_vanillanet(depth=5, width=16, dtype=dtype, rng=rng),
            "resnet": build_mini_resnet((1, 1), width=8, mode="full", dtype=dtype, rng=rng),
        }
        for name, g in graphs.items():
            _trained_like(g, rng, shared_theta=name == "vanillanet")
            probe = rng.standard_normal((C3_PROBES,) + g.input_shape).astype(dtype)
            fused, report = fuse_network(g, probe=probe)
            with no_grad():
                a = g(Tensor(probe, dtype=dtype)).data
                b = fused(Tensor(probe, dtype=dtype)).data
            diff = float(np.max(np.abs(a.astype(np.float64) - b)))
            details.append(f"{name}/{np.dtype(dtype).name}={diff:.1e}")
            assert diff < tol and report.max_abs_diff < tol
            assert np.array_equal(a.argmax(1), b.argmax(1)) and report.argmax_preserved
            assert fused.node_count() < g.node_count()
    elapsed = time.perf_counter() - start
    request.node.criterion_detail = ", ".join(details) + f", {elapsed:.1f}s"
    assert elapsed < C3_SECONDS


@pytest.mark.criterion(4, "theta fold is exact for ReLU and refused for non-homogeneous bases")
def test_c4_theta_fold(request):
    rng = np.random.default_rng(4)
    probe = rng.standard_normal((20, 3, 32, 32))

    g = _trained_like(build_mini_vanillanet(depth=5, width=8, base="relu", dtype=np.float64, rng=rng), rng)
    for layer in g.lslu_layers():
        layer.p.bias.data[:] = 0.0
    fused, report = fuse_network(g, probe=probe)
    folded = [r for r in report.rows if r[1].startswith("fold_theta")]
    assert len(folded) == len(g.lslu_layers()) and not report.not_foldable
    assert all(np.all(layer.p.theta.data == 1.0) for layer in fused.lslu_layers())
    relu_diff = report.max_abs_diff
    assert relu_diff < C4_TOL

    g = _trained_like(build_mini_vanillanet(depth=5, width=8, base="gelu", dtype=np.float64, rng=rng), rng)
    fused, report = fuse_network(g, probe=probe)
    assert len(report.not_foldable) == len(g.lslu_layers())
    assert all("homogeneous" in reason for _, reason in report.not_foldable)
    with no_grad():
        gelu_diff = float(np.max(np.abs(g(Tensor(probe)).data - fused(Tensor(probe)).data)))
    request.node.criterion_detail = f"relu fold {relu_diff:.1e}, gelu refused with diff {gelu_diff:.1e}"
    assert gelu_diff < C4_TOL


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    """Train N=3 and N=0 on the MNIST subset for each seed; (results, seconds)."""
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.fail(f"MNIST subset missing under {MNIST_DIR}; run scripts/make_mnist_subset.py")
    tmp = tmp_path_factory.mktemp("mnist")
    results = {}
    start = time.perf_counter()
    for seed in C5_SEEDS:
        for n in (3, 0):
            out = tmp / f"n{n}_s{seed}"
            cfg = write_config(tmp / f"n{n}_s{seed}.json", {**C5_CONFIG, "n_terms": n, "seed": seed})
            assert main(["train", "--config", cfg, "--out", str(out), "--run-id", f"n{n}_s{seed}"]) == 0
            acc = float(read_rows(out / "metrics.csv")[-1]["val_acc"])
            results[(n, seed)] = {"acc": acc, "dir": out}
    return results, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(5, "MNIST subset: N=3 reaches 90% and stays within 1 point of N=0")
def test_c5_mnist_efficacy(mnist_runs, request):
    results, elapsed = mnist_runs
    accs = [(seed, results[(3, seed)]["acc"], results[(0, seed)]["acc"]) for seed in C5_SEEDS]
    request.node.criterion_detail = " ".join(f"s{s}:{a:.3f}/{b:.3f}" for s, a, b in accs) + f", {elapsed:.0f}s"
    for _, acc, base in accs:
        assert acc >= C5_MIN_ACC
        assert acc >= base - C5_BASELINE_SLACK
    assert elapsed < C5_SECONDS


@pytest.mark.slow
@pytest.mark.criterion(6, "trajectory CSV per scalar per epoch, exact init, settled last 10 epochs")
def test_c6_trajectories(mnist_runs, request):
    results, _ = mnist_runs
    worst = 0.0
    for seed in C5_SEEDS:
        run = results[(3, seed)]["dir"]
        records = read_trajectories(run / "trajectories.csv")
        layers = {r.layer for r in records}
        epochs = sorted({r.epoch for r in records})
        assert epochs == list(range(C5_CONFIG["epochs"] + 1))
        for layer in layers:
            for epoch in epochs:
                rows = [r for r in records if r.layer == layer and r.epoch == epoch]
                assert len(rows) == 4 * 3
        for r in records:
            if r.epoch == 0 and r.kind == "theta":
                assert r.value == 1.0
            if r.epoch == 0 and r.kind == "omega":
                assert r.value == 0.0
        stats = convergence_stats(records, last_k=C6_LAST)
        assert len(stats) == 4 * 3 * len(layers)
        worst = max(worst, max(std for _, std in stats.values()))
    request.node.criterion_detail = f"max std over last {C6_LAST} epochs {worst:.4f}"
    assert worst < C6_STD


@pytest.mark.criterion(7, "ablation over n=0..4 writes 5 rows; params grow by 4 per term per layer")
def test_c7_ablation(tmp_path, request):
    cfg = {
        "dataset": "synthetic", "synthetic_per_class": 20, "synthetic_size": 8, "arch": "mini-resnet",
        "blocks": [1, 1], "width": 4, "insertion": "full", "epochs": 1, "batch_size": 20,
    }
    code = main(["ablate", "--config", write_config(tmp_path / "c.json", cfg), "--n-values", "0,1,2,3,4",
                 "--latency-iters", "2", "--out", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "ablation.csv", newline="") as fh:
        header = next(csv.reader(fh))
    rows = read_rows(tmp_path / "ablation.csv")
    assert header == ["n", "params", "flops", "acc", "latency_ms"]
    assert [int(r["n"]) for r in rows] == [0, 1, 2, 3, 4]
    n_layers = len(build_mini_resnet((1, 1), width=4, mode="full", in_channels=1, input_size=8, n_classes=2).lslu_layers())
    steps = [int(b["params"]) - int(a["params"]) for a, b in zip(rows, rows[1:])]
    request.node.criterion_detail = f"params {[int(r['params']) for r in rows]}, {n_layers} layers"
    assert steps == [4 * n_layers] * 4


@pytest.mark.criterion(8, "class selectivity lies in [0,1], one-hot gives 1, uniform gives 0")
def test_c8_selectivity(request):
    rng = np.random.default_rng(8)
    random_csi = selectivity_index(rng.standard_normal((10, 1000)) * 5)
    one_hot = selectivity_index(np.eye(10) * 3.0)
    uniform = selectivity_index(np.full((10, 7), 0.4))
    request.node.criterion_detail = f"random range [{random_csi.min():.3f}, {random_csi.max():.3f}]"
    assert random_csi.min() >= 0.0 and random_csi.max() <= 1.0
    np.testing.assert_allclose(one_hot, 1.0, atol=1e-9)
    assert np.all(uniform == 0.0)


@pytest.mark.criterion(9, "train-mode batch norm standardizes before the affine step")
def test_c9_bn_statistics(request):
    rng = np.random.default_rng(9)
    worst_mean = worst_var = 0.0
    for batch in (16, 32, 64):
        bn = BatchNorm2d(5, dtype=np.float64)
        bn.state.gamma.data[:] = rng.uniform(0.5, 2.0, 5)
        bn.state.beta.data[:] = rng.standard_normal(5)
        x = rng.standard_normal((batch, 5, 3, 3)) * rng.uniform(0.1, 50, 5)[None, :, None, None] + 20
        out = bn(Tensor(x)).data
        gamma, beta = bn.state.gamma.data[None, :, None, None], bn.state.beta.data[None, :, None, None]
        xhat = (out - beta) / gamma
        worst_mean = max(worst_mean, float(np.max(np.abs(xhat.mean(axis=(0, 2, 3))))))
        worst_var = max(worst_var, float(np.max(np.abs(xhat.var(axis=(0, 2, 3)) - 1))))
    request.node.criterion_detail = f"|mean|={worst_mean:.1e}, |var-1|={worst_var:.1e}"
    assert worst_mean < C9_MEAN
    assert worst_var < C9_VAR


@pytest.mark.criterion(10, "two identical train runs give bitwise-identical metrics and trajectories")
def test_c10_determinism(tmp_path, request):
    cfg = write_config(tmp_path / "c.json", {
        "dataset": "synthetic", "synthetic_per_class": 30, "synthetic_size": 8, "arch": "mini-vanillanet",
        "depth": 4, "width": 6, "dropout": 0.1, "epochs": 3, "batch_size": 16, "seed": 11,
    })
    for run in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / run)]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("metrics.csv", "trajectories.csv")}
    request.node.criterion_detail = ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items())
    assert all(same.values())
