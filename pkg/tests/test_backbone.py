import numpy as np
import pytest

from artext import tensor as T
from artext.backbone import Backbone, ResidualBlock
from artext.errors import ShapeError


@pytest.fixture(scope="module")
def net():
    return Backbone(rng=np.random.default_rng(0))


def test_shape_contract_64(net):
    x = T.Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
    shapes = [tuple(lv.shape) for lv in net(x)]
    assert shapes == [(1, 64, 16, 16), (1, 128, 8, 8), (1, 256, 4, 4), (1, 512, 2, 2)]


def test_shape_contract_non_square(net):
    x = T.Tensor(np.zeros((2, 3, 96, 64), dtype=np.float32))
    shapes = [tuple(lv.shape) for lv in net(x)]
    assert shapes == [(2, 64, 24, 16), (2, 128, 12, 8), (2, 256, 6, 4), (2, 512, 3, 2)]


def test_indivisible_size_rejected(net):
    with pytest.raises(ShapeError):
        net(T.Tensor(np.zeros((1, 3, 60, 64), dtype=np.float32)))


def test_deterministic_forward(net):
    x = np.random.default_rng(1).normal(size=(1, 3, 64, 64)).astype(np.float32)
    a = net(T.Tensor(x))
    b = net(T.Tensor(x))
    for la, lb in zip(a, b):
        assert np.array_equal(la.data, lb.data)


def test_gradient_reaches_stem_from_last_level(net):
    x = T.Tensor(np.random.default_rng(2).normal(size=(1, 3, 64, 64)).astype(np.float32))
    net.zero_grads()
    levels = net(x)
    T.backward(T.sum_all(levels[3]))
    assert net.stem1.weight.grad is not None
    assert float(np.abs(net.stem1.weight.grad).max()) > 0.0


def test_every_parameter_gets_gradient(net):
    x = T.Tensor(np.random.default_rng(3).normal(size=(1, 3, 64, 64)).astype(np.float32))
    net.zero_grads()
    levels = net(x)
    loss = T.sum_all(levels[0])
    for lv in levels[1:]:
        loss = loss + T.sum_all(lv)
    T.backward(loss)
    for name, p in net.named_parameters():
        assert p.grad is not None, name


def test_residual_block_identity_shortcut_exact():
    # zeroed convs leave only the shortcut; stride-1 same-width block is identity
    blk = ResidualBlock(8, 8, 1, np.random.default_rng(0))
    assert blk.proj is None
    blk.conv1.weight.zero_()
    blk.conv2.weight.zero_()
    x = np.abs(np.random.default_rng(4).normal(size=(1, 8, 5, 5))).astype(np.float32)
    out = blk(T.Tensor(x))
    assert np.array_equal(out.data, x)  # relu is a no-op on positive input


def test_residual_block_projection_used_on_stride2():
    blk = ResidualBlock(8, 16, 2, np.random.default_rng(0))
    assert blk.proj is not None
    out = blk(T.Tensor(np.zeros((1, 8, 6, 6), dtype=np.float32)))
    assert out.shape == (1, 16, 3, 3)


def test_param_count_well_under_resnet50():
    # the stand-in must stay desk-sized; full ResNet-50 is ~25M
    assert Backbone(rng=np.random.default_rng(0)).param_count() < 15_000_000
