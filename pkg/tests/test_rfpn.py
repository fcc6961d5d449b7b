import numpy as np
import pytest

from artext import tensor as T
from artext.errors import ConfigError
from artext.gradcheck import check_module_gradient
from artext.rfpn import RFPN, RFRM, RdbBlock


def rand_pyramid(rng, n=1, base=16, widths=(64, 128, 256, 512)):
    return [T.Tensor(rng.normal(size=(n, w, base // 2 ** i, base // 2 ** i)).astype(np.float32))
            for i, w in enumerate(widths)]


class TestRdbBlock:
    def test_zero_weights_pure_residual(self):
        blk = RdbBlock(32, rng=np.random.default_rng(0))
        for layer in blk.layers:
            layer.weight.zero_()
        blk.fusion.weight.zero_()
        x = np.random.default_rng(1).normal(size=(1, 32, 5, 5)).astype(np.float32)
        assert np.array_equal(blk(T.Tensor(x)).data, x)

    def test_shape_preserved(self):
        blk = RdbBlock(64, rng=np.random.default_rng(0))
        out = blk(T.Tensor(np.zeros((1, 64, 16, 16), dtype=np.float32)))
        assert out.shape == (1, 64, 16, 16)

    def test_dense_layer_widths(self):
        blk = RdbBlock(64, growth=16, rng=np.random.default_rng(0))
        in_widths = [layer.weight.shape[1] for layer in blk.layers]
        assert in_widths == [64, 80, 96, 112]
        assert blk.fusion.weight.shape == (64, 128, 1, 1)

    def test_matches_unrolled_oracle(self):
        from artext import ops
        blk = RdbBlock(16, rng=np.random.default_rng(2)).astype(np.float64)
        x = np.random.default_rng(3).normal(size=(1, 16, 6, 6))

        def conv_np(arr, layer):
            out = ops.conv2d(T.Tensor(arr), T.Tensor(layer.weight.data),
                             T.Tensor(layer.bias.data), pad=layer.pad).data
            return out

        feats = x
        cur = [x]
        for layer in blk.layers:
            nxt = np.maximum(conv_np(feats, layer), 0.0)
            cur.append(nxt)
            feats = np.concatenate(cur, axis=1)
        want = x + conv_np(feats, blk.fusion)
        got = blk(T.Tensor(x)).data
        assert np.max(np.abs(got - want)) < 1e-6

    def test_channel_mismatch_rejected(self):
        blk = RdbBlock(32, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            blk(T.Tensor(np.zeros((1, 16, 4, 4), dtype=np.float32)))


class TestRFRM:
    def test_default_init_is_exact_identity(self):
        mod = RFRM(128, rng=np.random.default_rng(0))
        d = np.random.default_rng(1).normal(size=(1, 128, 4, 4)).astype(np.float32)
        assert np.array_equal(mod(T.Tensor(d)).data, d)

    def test_all_zero_weights_identity(self):
        mod = RFRM(64, rng=np.random.default_rng(0))
        for _, p in mod.named_parameters():
            p.zero_()
        d = np.random.default_rng(2).normal(size=(1, 64, 5, 5)).astype(np.float32)
        assert np.array_equal(mod(T.Tensor(d)).data, d)

    def test_subtraction_reconstructs_input(self):
        mod = RFRM(64, rng=np.random.default_rng(3))
        # move the zeroed conv so the branch is active
        mod.crc2.weight.data[...] = np.random.default_rng(4).normal(
            size=mod.crc2.weight.shape).astype(np.float32) * 0.1
        d = np.random.default_rng(5).normal(size=(1, 64, 4, 4)).astype(np.float32)
        dt = T.Tensor(d)
        clean = mod(dt).data
        noise = mod.noise(dt).data
        assert np.allclose(clean + noise, d, atol=1e-6)

    def test_grad_vs_fd(self):
        mod = RFRM(16, work=8, rng=np.random.default_rng(6)).astype(np.float64)
        mod.crc2.weight.data[...] = np.random.default_rng(7).normal(
            size=mod.crc2.weight.shape) * 0.1
        d = T.Tensor(np.random.default_rng(8).normal(size=(1, 16, 4, 4)))
        wt = np.random.default_rng(9).normal(size=(1, 16, 4, 4))
        # small step: the ReLU stack puts kinks near zero and a 1e-3 probe
        # would step across them
        check_module_gradient(lambda: T.sum_all(T.mul_const(mod(d), wt)), mod,
                              h=1e-5, entries_per_param=2)


class TestRFPN:
    def test_fused_shape(self):
        mod = RFPN(rng=np.random.default_rng(0))
        out = mod(rand_pyramid(np.random.default_rng(1)))
        assert out.shape == (1, 64, 16, 16)

    def test_rfrm_disabled_ignores_rfrm_weights(self):
        a = RFPN(use_rfrm=False, rng=np.random.default_rng(2))
        pyr = rand_pyramid(np.random.default_rng(3))
        base = a(pyr).data
        for _, p in a.rfrm.named_parameters():
            p.data[...] = 7.0
        assert np.array_equal(a(pyr).data, base)

    def test_rfrm_enabled_at_init_matches_disabled(self):
        # zero-init crc2 makes the reduction a no-op, so both flags agree
        on = RFPN(use_rfrm=True, rng=np.random.default_rng(4))
        off = RFPN(use_rfrm=False, rng=np.random.default_rng(4))
        pyr = rand_pyramid(np.random.default_rng(5))
        assert np.array_equal(on(pyr).data, off(pyr).data)

    def test_parameter_names_stable_across_flag(self):
        on = RFPN(use_rfrm=True, rng=np.random.default_rng(0))
        off = RFPN(use_rfrm=False, rng=np.random.default_rng(0))
        assert [n for n, _ in on.named_parameters()] == [n for n, _ in off.named_parameters()]

    def test_bad_rfrm_level(self):
        with pytest.raises(ConfigError):
            RFPN(rfrm_level=4)

    def test_matches_unrolled_oracle(self):
        mod = RFPN(rng=np.random.default_rng(6)).astype(np.float64)
        pyr = [T.Tensor(lv.data.astype(np.float64)) for lv in rand_pyramid(np.random.default_rng(7))]
        got = mod(pyr).data

        # manual composition of the same calls
        levels = list(pyr)
        levels[2] = mod.rfrm(levels[2])
        lat = [conv(lv) for conv, lv in zip(mod.laterals, levels)]
        t3 = lat[3]
        t2 = lat[2] + T.upsample(t3, 2, "bilinear")
        t1 = lat[1] + T.upsample(t2, 2, "bilinear")
        t0 = lat[0] + T.upsample(t1, 2, "bilinear")
        cat = T.concat_channels([t0, T.upsample(t1, 2, "bilinear"),
                                 T.upsample(t2, 4, "bilinear"),
                                 T.upsample(t3, 8, "bilinear")])
        want = mod.fuse(cat).data
        assert np.max(np.abs(got - want)) < 1e-6

    def test_grad_reaches_all_laterals(self):
        mod = RFPN(rng=np.random.default_rng(8))
        pyr = rand_pyramid(np.random.default_rng(9))
        mod.zero_grads()
        T.backward(T.sum_all(mod(pyr)))
        for conv in mod.laterals:
            assert conv.weight.grad is not None
            assert np.abs(conv.weight.grad).max() > 0
