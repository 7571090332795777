import math

import numpy as np
import pytest

from lslu.errors import MissingGrad
from lslu.optim import SGD, Adam, EarlyStopping, adam_step, cosine_lr, early_stop, sgd_step
from lslu.tensor import Tensor


def param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


class TestSGD:
    def test_single_step(self):
        p = param([1.0])
        sgd_step([p], [np.array([0.5])], lr=0.1)
        assert p.data[0] == pytest.approx(0.95, abs=1e-15)

    def test_zero_grad_is_noop(self):
        p = param([1.0, -2.0])
        sgd_step([p], [np.zeros(2)], lr=0.1, momentum=0.9)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_momentum(self):
        p = param([0.0])
        state = sgd_step([p], [np.ones(1)], lr=1.0, momentum=0.9)
        assert p.data[0] == -1.0
        sgd_step([p], [np.ones(1)], lr=1.0, momentum=0.9, state=state)
        assert p.data[0] == pytest.approx(-2.9, abs=1e-15)

    def test_missing_grad(self):
        with pytest.raises(MissingGrad):
            SGD([param([1.0])]).step()


class TestAdam:
    def test_first_step(self):
        p = param([0.0])
        adam_step([p], [np.ones(1)], lr=1e-3)
        assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)

    def test_zero_grad_never_moves(self):
        p = param([0.3])
        state = None
        for _ in range(50):
            state = adam_step([p], [np.zeros(1)], state=state)
        assert p.data[0] == 0.3

    def test_constant_gradient_steps_tend_to_lr(self):
        p = param([0.0])
        state, prev, deltas = None, 0.0, []
        for _ in range(3000):
            state = adam_step([p], [np.array([-2.0])], state=state, lr=1e-3)
            deltas.append(p.data[0] - prev)
            prev = p.data[0]
        # sign(g) behaviour: every step moves against the gradient by about lr
        assert all(d > 0 for d in deltas)
        assert abs(deltas[-1] - 1e-3) < 1e-6

    def test_step_bound(self, rng):
        # per-element step is bounded by lr * (1 - b1) / sqrt(1 - b2), about 3.16 lr
        p = param(np.zeros(200))
        state = None
        bound = 1e-3 * (1 - 0.9) / math.sqrt(1 - 0.999)
        for t in range(300):
            g = rng.standard_normal(200) * (100.0 if t % 50 == 0 else 1e-3)
            before = p.data.copy()
            state = adam_step([p], [g], state=state, lr=1e-3)
            assert np.max(np.abs(p.data - before)) <= bound * (1 + 1e-9)

    def test_class_interface(self):
        p = param([1.0])
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        opt.zero_grad()
        assert p.grad is None and p.data[0] < 1.0


class TestCosine:
    def test_values(self):
        assert cosine_lr(0, 10, 3.5e-3) == 3.5e-3
        assert cosine_lr(10, 10, 3.5e-3, 1e-5) == 1e-5
        assert cosine_lr(5, 10, 3.5e-3) == pytest.approx(1.75e-3, abs=1e-18)

    def test_monotone(self):
        values = [cosine_lr(t, 20, 1.0, 0.1) for t in range(21)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_errors(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1.0)
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 1.0)


class TestEarlyStopping:
    def test_improving_never_stops(self):
        assert early_stop(list(range(30)), patience=3) is None

    def test_flat_history(self):
        assert early_stop([0.5] * 8, patience=7) == 8
        assert early_stop([0.5] * 7, patience=7) is None

    def test_improvement_resets(self):
        # four stale epochs, improvement at epoch 6, then stale from epoch 7 on
        history = [0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.2]
        assert early_stop(history, patience=5) is None
        assert early_stop(history + [0.2], patience=5) == 11

    def test_min_mode(self):
        stopper = EarlyStopping(2, mode="min")
        assert [stopper.update(v) for v in (3.0, 2.0, 2.5, 2.1)] == [False, False, False, True]

    def test_validation(self):
        with pytest.raises(ValueError):
            EarlyStopping(0)
        with pytest.raises(ValueError):
            EarlyStopping(3, mode="up")
