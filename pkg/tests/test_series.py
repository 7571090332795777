import numpy as np
import pytest

from lslu import tensor as T
from lslu.layers import base_activation
from lslu.series import LSLU, BlendSchedule, BlendedActivation, SeriesActivationParams, blended_activation, init_lslu, lslu_forward
from lslu.tensor import Tensor

from conftest import rel_err

BASES = ("relu", "leakyrelu", "gelu", "silu")


def params(theta, omega, alpha, bias, base="relu"):
    vec = lambda v: Tensor(np.array(v, dtype=np.float64), requires_grad=True)  # noqa: E731
    return SeriesActivationParams(len(theta), base, vec(theta), vec(omega), vec(alpha), vec(bias))


class TestForward:
    def test_init_identity_points(self):
        p = init_lslu(3, "relu", np.float64)
        assert lslu_forward(Tensor([-2.0, 2.0]), p).data.tolist() == [0.0, 2.0]

    def test_hand_example(self):
        p = params([2, 1], [0.1, -0.1], [1, 0.5], [0, -1])
        assert abs(lslu_forward(Tensor([0.5]), p).item() - 1.0) < 1e-15

    @pytest.mark.parametrize("base", BASES)
    def test_zero_terms_is_base(self, base, rng):
        x = Tensor(rng.standard_normal(100))
        p = init_lslu(0, base, np.float64)
        np.testing.assert_array_equal(lslu_forward(x, p).data, base_activation(base, x).data)
        assert LSLU(0, base).params() == {}

    @pytest.mark.parametrize("base", BASES)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_init_identity_exact(self, base, dtype, rng):
        x = Tensor(rng.standard_normal(1000) * 3, dtype=dtype)
        ref = base_activation(base, x).data
        for n in range(1, 5):
            out = lslu_forward(x, init_lslu(n, base, dtype)).data
            assert out.dtype == ref.dtype
            np.testing.assert_array_equal(out, ref)

    def test_matches_direct_sum(self, rng):
        theta, omega = rng.uniform(0.5, 2, 4), rng.standard_normal(4)
        alpha, bias = rng.uniform(0, 1, 4), rng.standard_normal(4)
        x = rng.standard_normal((2, 3, 4, 4))
        for base in BASES:
            p = params(theta, omega, alpha, bias, base)
            ref = sum(
                theta[n] * alpha[n] * base_activation(base, Tensor(x + bias[n])).data + omega[n] for n in range(4)
            )
            np.testing.assert_allclose(lslu_forward(Tensor(x), p).data, ref, atol=1e-13)

    def test_init_values(self):
        p = init_lslu(1, "gelu")
        assert [p.theta.data.tolist(), p.omega.data.tolist(), p.alpha.data.tolist(), p.bias.data.tolist()] == [[1], [0], [1], [0]]
        p = init_lslu(4)
        np.testing.assert_array_equal(p.alpha.data, np.float32(0.25))

    def test_invalid(self):
        with pytest.raises(ValueError):
            init_lslu(-1)
        with pytest.raises(ValueError):
            params([1, 1], [0], [1, 1], [0, 0])


class TestGradients:
    def test_contract(self, rng):
        # dS/dtheta_n = alpha_n f(x+b_n), dS/domega_n = 1, dS/dalpha_n = theta_n f(x+b_n), dS/dx = sum theta alpha f'
        theta, omega = np.array([1.5, 0.7]), np.array([0.2, -0.3])
        alpha, bias = np.array([0.6, 0.4]), np.array([0.0, 0.5])
        x = rng.uniform(-2, 2, 50)
        x = x[(np.abs(x) > 1e-3) & (np.abs(x + 0.5) > 1e-3)]
        p = params(theta, omega, alpha, bias)
        xt = Tensor(x, requires_grad=True)
        T.sum_(lslu_forward(xt, p)).backward()
        f = [np.maximum(x + b, 0) for b in bias]
        fp = [(x + b > 0).astype(float) for b in bias]
        np.testing.assert_allclose(p.theta.grad, [alpha[n] * f[n].sum() for n in range(2)], atol=1e-12)
        np.testing.assert_allclose(p.omega.grad, [x.size, x.size], atol=1e-12)
        np.testing.assert_allclose(p.alpha.grad, [theta[n] * f[n].sum() for n in range(2)], atol=1e-12)
        np.testing.assert_allclose(p.bias.grad, [theta[n] * alpha[n] * fp[n].sum() for n in range(2)], atol=1e-12)
        np.testing.assert_allclose(xt.grad, sum(theta[n] * alpha[n] * fp[n] for n in range(2)), atol=1e-12)

    @pytest.mark.parametrize("base", BASES)
    def test_finite_differences(self, base, rng):
        p = params(rng.uniform(0.5, 2, 3), rng.standard_normal(3), rng.uniform(0.2, 1, 3), [0.0, 0.3, -0.4], base)
        x = rng.standard_normal(60)
        # keep points farther than 10h from every shifted kink
        x = x[np.min(np.abs(x[:, None] + p.bias.data[None, :]), axis=1) > 1e-4]
        readout = rng.standard_normal(x.size)

        def value():
            return float(np.sum(lslu_forward(Tensor(x), p).data * readout))

        T.sum_(T.mul(lslu_forward(Tensor(x), p), Tensor(readout))).backward()
        for key, t in p.tensors().items():
            num = np.zeros(3)
            for i in range(3):
                orig = t.data[i]
                t.data[i] = orig + 1e-5
                up = value()
                t.data[i] = orig - 1e-5
                down = value()
                t.data[i] = orig
                num[i] = (up - down) / 2e-5
            assert rel_err(t.grad, num) < 1e-6, key


class TestBlend:
    def test_endpoints(self, rng):
        x = Tensor(rng.standard_normal(20))
        np.testing.assert_array_equal(blended_activation(x, 0.0, "relu").data, np.maximum(x.data, 0))
        np.testing.assert_array_equal(blended_activation(x, 1.0, "relu").data, x.data)

    def test_midpoint(self):
        assert blended_activation(Tensor([-2.0]), 0.5, "relu").item() == -1.0

    def test_schedule(self):
        s = BlendSchedule(4)
        assert s.lam == 0.0
        assert [s.step_to(e) for e in (1, 2, 4, 6)] == [0.25, 0.5, 1.0, 1.0]
        with pytest.raises(ValueError):
            s.step_to(3)
        with pytest.raises(ValueError):
            BlendSchedule(0)
        assert blended_activation(Tensor([-2.0]), BlendSchedule(2, 1)).item() == -1.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            blended_activation(Tensor([1.0]), 1.5)

    def test_node(self):
        node = BlendedActivation("relu", 0.0)
        node.set_buffer("lam", np.array([1.0]))
        assert node.is_identity and node.kink_margin(np.zeros(3)) == float("inf")
