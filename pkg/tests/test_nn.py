import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvvolume.errors import ConfigError, NumericFault, ShapeError
from lvvolume.nn import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    ReLU,
    VGGConfig,
    build_vgg20bn,
    checkpoint,
    vgg20bn_spec,
)
from lvvolume.nn.gradcheck import check_layer, check_network, rel_error

seeds = st.integers(0, 2**32 - 1)


def loop_conv(x, w, b):
    """Six-loop 'same' cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    s = b[oi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                r, q = i + di - p, j + dj - p
                                if 0 <= r < h and 0 <= q < wd:
                                    s += x[ni, ci, r, q] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = s
    return out


def conv(cin, cout, k, seed=0):
    layer = Conv2D(cin, cout, k)
    layer.init_params(np.random.default_rng(seed), np.float64)
    layer.params["b"] = np.random.default_rng(seed + 1).standard_normal(cout)
    return layer


@pytest.mark.parametrize("k", [1, 3, 5, 7, 9])
def test_conv_matches_loop(k):
    rng = np.random.default_rng(k)
    layer = conv(2, 3, k, seed=k)
    x = rng.standard_normal((2, 2, 8, 8))
    assert np.max(np.abs(layer.forward(x) - loop_conv(x, layer.params["w"], layer.params["b"]))) < 1e-10


def test_conv_3x3_single_channel_loop():
    rng = np.random.default_rng(0)
    layer = conv(1, 1, 3)
    x = rng.standard_normal((1, 1, 8, 8))
    assert np.max(np.abs(layer.forward(x) - loop_conv(x, layer.params["w"], layer.params["b"]))) < 1e-10


def test_conv_identity_kernel_19():
    layer = Conv2D(1, 1, 19)
    layer.params["w"][0, 0, 9, 9] = 1.0
    x = np.random.default_rng(1).standard_normal((2, 1, 24, 24))
    assert np.allclose(layer.forward(x), x, atol=1e-12)


def test_conv_same_padding_shape():
    assert conv(3, 4, 5).forward(np.zeros((1, 3, 11, 13))).shape == (1, 4, 11, 13)
    with pytest.raises(ShapeError):
        Conv2D(1, 1, 4)


def test_relu_examples():
    r = ReLU()
    assert not r.forward(-np.random.default_rng(2).random((3, 4)) - 0.1).any()
    x = np.random.default_rng(3).random((3, 4)) + 0.1
    r.forward(x)
    g = np.random.default_rng(4).standard_normal((3, 4))
    assert np.array_equal(r.backward(g), g)


def test_dense_identity_backward():
    d = Dense(5, 5)
    d.params["w"] = np.eye(5)
    d.forward(np.random.default_rng(5).standard_normal((2, 5)))
    g = np.random.default_rng(6).standard_normal((2, 5))
    assert np.array_equal(d.backward(g), g)


def test_maxpool_first_max():
    p = MaxPool2()
    x = np.ones((1, 1, 2, 2))
    p.forward(x)
    assert np.array_equal(p.backward(np.array([[[[3.0]]]])), [[[[3.0, 0.0], [0.0, 0.0]]]])


def test_dropout_inverted_scaling():
    d = Dropout(0.25, seed=0)
    x = np.ones((200, 50))
    y = d.forward(x, train=True)
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs(y.mean() - 1) < 0.02
    assert np.array_equal(d.forward(x, train=False), x)


@given(seeds)
def test_batchnorm_normalizes(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3)
    x = rng.standard_normal((8, 3, 4, 5)) * rng.uniform(0.5, 5, (1, 3, 1, 1)) + rng.uniform(-5, 5, (1, 3, 1, 1))
    y = bn.forward(x, train=True)
    var = x.var(axis=(0, 2, 3))
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    # biased variance; eps shrinks the output variance by var / (var + eps)
    assert np.allclose(y.var(axis=(0, 2, 3)), var / (var + bn.eps), atol=1e-5)
    assert np.allclose(bn.state["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))


LAYERS = {
    "conv3": lambda: (conv(2, 3, 3), (3, 2, 6, 6)),
    "conv7_fft": lambda: (conv(2, 2, 7), (2, 2, 9, 9)),
    "conv19_fft": lambda: (conv(1, 2, 19), (2, 1, 12, 12)),
    "bn4d": lambda: (BatchNorm(3), (4, 3, 3, 3)),
    "bn2d": lambda: (BatchNorm(5), (6, 5)),
    "relu": lambda: (ReLU(), (3, 7)),
    "maxpool": lambda: (MaxPool2(), (2, 2, 4, 6)),
    "flatten": lambda: (Flatten(), (2, 3, 2, 2)),
    "dense": lambda: (Dense(6, 4), (3, 6)),
    "dropout": lambda: (Dropout(0.3, seed=1), (4, 9)),
}


@pytest.mark.parametrize("name", sorted(LAYERS))
@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("train", [True, False])
def test_layer_gradients(name, seed, train):
    layer, shape = LAYERS[name]()
    rng = np.random.default_rng(seed)
    layer.init_params(rng, np.float64)
    for k in layer.params:
        layer.params[k] = layer.params[k] + 0.3 * rng.standard_normal(layer.params[k].shape)
    if isinstance(layer, BatchNorm):
        layer.state["running_var"] = rng.uniform(0.5, 2, layer.channels)
    x = rng.standard_normal(shape)
    for res in check_layer(layer, x, seed=seed, train=train):
        assert res.error < 1e-4, (name, res)


def test_rel_error():
    assert rel_error([0, 0], [0, 0]) == 0.0
    assert rel_error([1, 0], [0, 0]) == 1.0


def test_check_finite():
    d = Dense(2, 1)
    d.params["w"][:] = np.inf
    net_x = np.ones((1, 2))
    with pytest.raises(NumericFault):
        from lvvolume.nn.layers import check_finite

        check_finite(d.forward(net_x), "fc")


# ---------------------------------------------------------------- network

def conv_count(spec):
    return sum(d["kind"] == "conv" for d in spec)


def test_vgg_default_shapes():
    cfg = VGGConfig()
    spec = vgg20bn_spec(cfg)
    assert conv_count(spec) == 16
    assert sum(d["kind"] == "fc" for d in spec) == 4
    assert spec[0]["kernel"] == 19 and all(d["kernel"] == 3 for d in spec if d["kind"] == "conv" and d is not spec[0])
    shape, sides = (3, 224, 224), []
    from lvvolume.nn.layers import layer_from_spec

    for d in spec:
        shape = layer_from_spec(d).output_shape(shape)
        if d["kind"] == "maxpool":
            sides.append(shape[1])
    assert sides == [112, 56, 28, 14, 7]
    assert shape == (1,)
    assert [d["n_out"] for d in spec if d["kind"] == "fc"] == [4096, 4096, 1000, 1]


def test_vgg_kernel_3_baseline():
    assert vgg20bn_spec(VGGConfig(first_kernel_size=3))[0]["kernel"] == 3


def test_vgg_config_validation():
    with pytest.raises(ConfigError):
        VGGConfig(input_hw=100)
    with pytest.raises(ConfigError):
        VGGConfig(first_kernel_size=4)
    with pytest.raises(ConfigError):
        VGGConfig(channel_scale=0)


@pytest.fixture(scope="module")
def desk_net():
    return build_vgg20bn(input_channels=1, channel_scale=1 / 16, input_hw=64, seed=0)


def test_desk_forward_properties(desk_net):
    assert desk_net.forward(np.zeros((1, 1, 64, 64)), "infer").min() >= 0
    x = np.random.default_rng(0).standard_normal((3, 1, 64, 64))
    a, b = desk_net.predict(x), desk_net.predict(x)
    assert np.array_equal(a, b) and (a >= 0).all()
    pair = np.repeat(x[:1], 2, axis=0)
    p = desk_net.predict(pair)
    assert p[0] == p[1]
    assert desk_net.predict(x[:1])[0] == pytest.approx(a[0], abs=1e-12)


def test_desk_forward_shape_check(desk_net):
    with pytest.raises(ShapeError):
        desk_net.forward(np.zeros((1, 2, 64, 64)))
    with pytest.raises(ConfigError):
        desk_net.forward(np.zeros((1, 1, 64, 64)), "eval")


@pytest.mark.parametrize("seed", [0, 1])
def test_desk_network_gradients(seed):
    net = build_vgg20bn(input_channels=2, channel_scale=1 / 16, input_hw=32, first_kernel_size=7, seed=seed)
    net.layers[-2].params["b"][:] = 5.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 2, 32, 32))
    y = net.forward(x, "train")[:, 0] + rng.uniform(-3, 3, 4)
    for res in check_network(net, x, y, seed=seed, directions=1):
        assert res.error < 1e-4, res


def test_checkpoint_round_trip(desk_net, tmp_path):
    x = np.random.default_rng(1).standard_normal((2, 1, 64, 64))
    desk_net.forward(x, "train")  # move BN running stats off their init
    path = checkpoint.save(desk_net, tmp_path / "m.ckpt", {"seed": 4})
    net, meta = checkpoint.load(path)
    assert meta == {"seed": 4}
    assert net.spec() == desk_net.spec()
    assert np.array_equal(net.predict(x), desk_net.predict(x))
    assert checkpoint.to_bytes(net, meta) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(Exception):
        checkpoint.from_bytes(b"not a checkpoint")


def test_float32_network():
    net = build_vgg20bn(input_channels=1, channel_scale=1 / 32, input_hw=32, seed=0, dtype=np.float32)
    out = net.forward(np.zeros((2, 1, 32, 32)), "train")
    assert out.dtype == np.float32
