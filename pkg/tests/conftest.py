import numpy as np
import pytest

from lslu import tensor as T
from lslu.tensor import Tensor


def conv_loops(x, w, b, stride=1, pad=0):
    """Direct nested-loop cross-correlation, the reference for im2col convolution."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for i in range(n):
        for o in range(c_out):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for p in range(k):
                            for q in range(k):
                                acc += w[o, c, p, q] * xp[i, c, r * stride + p, s * stride + q]
                    out[i, o, r, s] = acc + (b[o] if b is not None else 0.0)
    return out


def rel_err(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12))


def grad_of(fn, *arrays):
    """Analytic gradients of scalar ``fn(*tensors)`` with respect to each array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


def numeric_grad(fn, arrays, which, h=1e-5):
    def f(t):
        args = [Tensor(a) for a in arrays]
        args[which] = t
        return fn(*args)

    return T.finite_diff_grad(f, Tensor(arrays[which]), h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion; prints one PASS/FAIL line")


@pytest.fixture(autouse=True)
def _criterion_verdict(request):
    yield
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        return
    rep = getattr(request.node, "rep_call", None)
    verdict = "PASS" if rep is not None and rep.passed else "FAIL"
    n, title = marker.args
    detail = getattr(request.node, "criterion_detail", "")
    line = f"criterion {n:>2} {verdict}  {title}" + (f"  [{detail}]" if detail else "")
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)
    else:
        print(line)
