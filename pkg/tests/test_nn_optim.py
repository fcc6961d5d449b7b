import numpy as np
import pytest

from artext import nn, ops
from artext import tensor as T
from artext.errors import ConfigError, UsageError
from artext.optim import Adam


class TestModule:
    def test_named_parameters_order_is_registration_order(self):
        class M(nn.Module):
            def __init__(self):
                super().__init__()
                self.a = nn.Conv2d(1, 1, 1)
                self.b = nn.Conv2d(1, 1, 1, bias=False)

        names = [n for n, _ in M().named_parameters()]
        assert names == ["a.weight", "a.bias", "b.weight"]

    def test_module_list_registration(self):
        class M(nn.Module):
            def __init__(self):
                super().__init__()
                self.blocks = [nn.Conv2d(1, 1, 1, bias=False) for _ in range(3)]

        names = [n for n, _ in M().named_parameters()]
        assert names == ["blocks.0.weight", "blocks.1.weight", "blocks.2.weight"]

    def test_param_count(self):
        conv = nn.Conv2d(3, 8, 3)
        assert conv.param_count() == 8 * 3 * 9 + 8

    def test_zero_grads(self):
        conv = nn.Conv2d(1, 1, 1)
        conv.weight.grad = np.ones_like(conv.weight.data)
        conv.zero_grads()
        assert conv.weight.grad is None

    def test_astype_roundtrip(self):
        conv = nn.Conv2d(2, 2, 3)
        conv.astype(np.float64)
        assert conv.weight.dtype == np.float64
        conv.astype(np.float32)
        assert conv.weight.dtype == np.float32


class TestConv2dLayer:
    def test_init_bound_is_fan_in_scaled(self):
        rng = np.random.default_rng(0)
        conv = nn.Conv2d(4, 16, 3, rng=rng)
        bound = np.sqrt(2.0 / (4 * 9))
        assert np.abs(conv.weight.data).max() <= bound
        assert np.allclose(conv.bias.data, 0.0)

    def test_same_rng_same_weights(self):
        a = nn.Conv2d(2, 2, 3, rng=np.random.default_rng(7))
        b = nn.Conv2d(2, 2, 3, rng=np.random.default_rng(7))
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_zero_fill(self):
        conv = nn.Conv2d(2, 2, 1)
        conv.weight.zero_()
        x = T.Tensor(np.random.default_rng(1).normal(size=(1, 2, 3, 3)).astype(np.float32))
        assert np.allclose(conv(x).data, 0.0)

    def test_bad_geometry(self):
        with pytest.raises(ConfigError):
            nn.Conv2d(0, 1, 3)


class TestAdam:
    def test_first_step_closed_form(self):
        # with a fresh state every entry moves by -lr * g/|g| modulo eps
        p = nn.Parameter(np.array([1.0, -2.0], dtype=np.float64))
        p.grad = np.array([0.3, -0.7])
        opt = Adam([p], lr=0.01)
        opt.step()
        # mhat = g, vhat = g^2 -> update = lr * sign(g) * |g|/(|g| + eps)
        expect = np.array([1.0, -2.0]) - 0.01 * np.array([0.3, -0.7]) / (np.abs([0.3, -0.7]) + 1e-8)
        assert np.allclose(p.data, expect, atol=1e-12)

    def test_ten_steps_match_reference_recurrence(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(10)]

        p = nn.Parameter(w0.copy())
        opt = Adam([p], lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8)
        for g in grads:
            p.grad = g.copy()
            opt.step()

        # independent replay of the textbook recurrences
        w = w0.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for i, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** i)
            vhat = v / (1 - 0.999 ** i)
            w -= 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.allclose(p.data, w, atol=1e-12)

    def test_missing_grad_raises(self):
        p = nn.Parameter(np.zeros(3))
        opt = Adam([p])
        with pytest.raises(UsageError):
            opt.step()

    def test_empty_params_rejected(self):
        with pytest.raises(UsageError):
            Adam([])

    def test_quadratic_descends(self):
        p = nn.Parameter(np.array([4.0], dtype=np.float64))
        opt = Adam([p], lr=0.1)
        for _ in range(200):
            opt.zero_grads()
            x = p
            loss = T.sum_all(T.mul(x, x))
            T.backward(loss)
            opt.step()
        assert abs(p.data[0]) < 0.05

    def test_state_survives_on_parameter(self):
        p = nn.Parameter(np.zeros(2))
        p.grad = np.ones(2)
        opt = Adam([p], lr=0.01)
        opt.step()
        assert p.m is not None and p.v is not None
        assert opt.t == 1


class TestTrainingSmoke:
    def test_conv_learns_identity_map(self):
        """A 1x1 conv can be driven to copy its input."""
        rng = np.random.default_rng(9)
        conv = nn.Conv2d(1, 1, 1, rng=rng)
        opt = Adam(conv.parameters(), lr=0.05)
        x = T.Tensor(rng.normal(size=(4, 1, 5, 5)).astype(np.float32))
        for _ in range(150):
            opt.zero_grads()
            out = conv(x)
            loss = ops.smooth_l1_loss(out, x.data)
            T.backward(loss)
            opt.step()
        assert conv.weight.data[0, 0, 0, 0] == pytest.approx(1.0, abs=0.05)
        assert conv.bias.data[0] == pytest.approx(0.0, abs=0.05)
