import numpy as np
import pytest

from binarch.ops import (CIFAR_GROUPS, MODES, OP_ORDER, ConvOp, GroupConfig, OpKind, expected_shape, make_op,
                         set_packed)
from binarch.tensor import Tensor

from oracles import conv2d_loops, sign_pm1

GEOM = {"gconv_3x3": (3, 1), "gconv_5x5": (5, 1), "dil_gconv_3x3": (3, 2), "dil_gconv_5x5": (5, 2)}


def bn_train(x, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def prelu(x, a=0.25):
    return np.where(x > 0, x, a * x)


def test_op_enumeration_order():
    assert [k.token for k in OP_ORDER] == ["gconv_3x3", "gconv_5x5", "dil_gconv_3x3", "dil_gconv_5x5",
                                           "skip_connect", "max_pool_3x3", "avg_pool_3x3", "zero"]


@pytest.mark.parametrize("stride", [1, 2])
def test_zero_op(stride):
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 8, 8)))
    y = make_op(OpKind.ZERO, 6, stride)(x)
    assert y.shape == (2, 6, 8 // stride, 8 // stride) and np.all(y.data == 0.0)


def test_identity_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 5, 5)))
    assert make_op(OpKind.IDENTITY, 6, 1)(x) is x


def test_real_gconv3_matches_composition():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 36, 6, 6))
    op = make_op(OpKind.GCONV3, 36, 1, MODES["real"], CIFAR_GROUPS, np.random.default_rng(2))
    assert op.groups == 12
    ref = prelu(conv2d_loops(bn_train(x), op.weight.data, 1, 1, 1, 12)) + x
    assert np.abs(op(Tensor(x)).data - ref).max() <= 1e-10


@pytest.mark.parametrize("kind", [k for k in OP_ORDER if k.is_conv])
@pytest.mark.parametrize("mode", ["bin-proposed", "bin-full", "bin-w-real-a", "real"])
def test_conv_op_domains_match_oracle(kind, mode):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 7, 7))
    m = MODES[mode]
    op = make_op(kind, 6, 1, m, GroupConfig(3), np.random.default_rng(4))
    k, d = GEOM[kind.token]
    h = bn_train(x)
    h = sign_pm1(h) if m.binary_acts else h
    w = sign_pm1(op.weight.data) if m.binary_weights else op.weight.data
    ref = prelu(conv2d_loops(h, w, 1, d * (k - 1) // 2, d, 2) * op.alpha.effective().reshape(1, -1, 1, 1)) + x
    assert np.abs(op(Tensor(x)).data - ref).max() <= 1e-10


def test_binary_activation_sign_invariance():
    rng = np.random.default_rng(5)
    op = make_op(OpKind.GCONV3, 6, 1, MODES["bin-proposed"], GroupConfig(3), rng, pre_bn=False)
    x1 = rng.uniform(0.1, 1.0, (1, 6, 5, 5))
    x2 = rng.uniform(3.0, 9.0, (1, 6, 5, 5))
    # the shortcut adds x back; the binarized branch itself only sees signs
    b1 = op(Tensor(x1)).data - x1
    b2 = op(Tensor(x2)).data - x2
    assert np.abs(b1 - b2).max() <= 1e-12


def test_dilated_op_preserves_size():
    y = make_op(OpKind.DIL_GCONV3, 6, 1)(Tensor(np.ones((1, 6, 9, 9))))
    assert y.shape == (1, 6, 9, 9)


def _shape_oracle(token, h, stride):
    if stride == 1:
        return h
    if token in GEOM:
        k, d = GEOM[token]
        return (h + 2 * (d * (k - 1) // 2) - d * (k - 1) - 1) // 2 + 1
    if token == "skip_connect":
        return h // 2
    return (h + 2 - 3) // 2 + 1 if token != "zero" else (h + 1) // 2


@pytest.mark.parametrize("kind", OP_ORDER)
@pytest.mark.parametrize("stride", [1, 2])
def test_op_shapes(kind, stride):
    x = Tensor(np.random.default_rng(6).normal(size=(2, 6, 8, 8)))
    y = make_op(kind, 6, stride, rng=np.random.default_rng(7))(x)
    h = _shape_oracle(kind.token, 8, stride)
    assert y.shape == (2, 6, h, h) == expected_shape(kind, x.shape, stride)


@pytest.mark.parametrize("kind", OP_ORDER)
def test_channel_mismatch_rejected(kind):
    op = make_op(kind, 6, 1)
    with pytest.raises(ValueError):
        op(Tensor(np.zeros((1, 9, 4, 4))))


@pytest.mark.parametrize("cpg,channels", [(1, 12), (5, 12), (4, 6)])
def test_group_config_rejects(cpg, channels):
    with pytest.raises(ValueError):
        make_op(OpKind.GCONV3, channels, 1, groups=GroupConfig(cpg))


def test_group_count_scales_with_width():
    g = GroupConfig(3)
    assert [g.groups_for(c) for c in (12, 24, 36, 72)] == [4, 8, 12, 24]


def test_bad_stride_rejected():
    with pytest.raises(ValueError):
        make_op(OpKind.GCONV3, 6, 3)


def test_binarize_weights_folds_magnitude():
    rng = np.random.default_rng(8)
    op = make_op(OpKind.GCONV5, 6, 1, MODES["bin-proposed"], GroupConfig(3), rng)
    op.eval()
    x = rng.normal(size=(2, 6, 6, 6))
    mag = np.abs(op.weight.data).reshape(6, -1).mean(axis=1)
    op.binarize_weights()
    assert op.mode == MODES["bin-full"]
    ref = prelu(conv2d_loops(sign_pm1(x / np.sqrt(1 + 1e-5)), sign_pm1(op.weight.data), 1, 2, 1, 2)
                * mag.reshape(1, -1, 1, 1)) + x
    assert np.abs(op(Tensor(x)).data - ref).max() <= 1e-10
    set_packed(op, True)
    assert np.abs(op(Tensor(x)).data - ref).max() <= 1e-10


def test_binarized_op_exact_for_binary_valued_weights():
    rng = np.random.default_rng(9)
    op = make_op(OpKind.GCONV3, 6, 1, MODES["bin-proposed"], GroupConfig(3), rng)
    op.weight.data[...] = 0.3 * sign_pm1(rng.normal(size=op.weight.shape))
    op.eval()
    x = Tensor(rng.normal(size=(1, 6, 5, 5)))
    before = op(x).data
    op.binarize_weights()
    assert np.allclose(op(x).data, before, atol=1e-12)


def test_conv_op_cost_formula():
    op = make_op(OpKind.GCONV3, 36, 1, MODES["bin-full"], CIFAR_GROUPS)
    _, layers = op.cost((36, 32, 32))
    assert layers[0].macs == 995_328 and layers[0].binary


@pytest.mark.parametrize("kind", [OpKind.ZERO, OpKind.IDENTITY, OpKind.MAX_POOL3, OpKind.AVG_POOL3])
def test_non_conv_ops_cost_nothing(kind):
    _, layers = make_op(kind, 6, 1).cost((6, 8, 8))
    assert sum(l.macs for l in layers) == 0


def test_from_token_errors_name_token():
    with pytest.raises(ValueError, match="conv_7x7"):
        OpKind.from_token("conv_7x7")


def test_mode_names_round_trip():
    for name, m in MODES.items():
        assert m.name == name
    assert isinstance(make_op(OpKind.GCONV3, 6), ConvOp)
