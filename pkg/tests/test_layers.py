import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_bn_leaky, direct_conv, sliding_max
from tinydet import gradcheck
from tinydet.errors import ShapeError, StateError
from tinydet.layers import (Network, activate, conv_backward, conv_forward, forward_pass, maxpool_backward,
                            maxpool_forward, route_backward, route_forward, upsample_backward, upsample_forward)
from tinydet.netdef import ConvParams, parse_cfg, zero_weights
from tinydet.trainer import init_weights


def test_leaky_and_linear():
    v = np.array([-2.0, 0.0, 3.0])
    assert np.array_equal(activate(v, "leaky"), [-0.2, 0.0, 3.0])
    assert np.array_equal(activate(v, "linear"), v)


def test_conv_bn_leaky_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    gamma, beta = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
    mean, var = rng.standard_normal(4), rng.uniform(0.5, 2, 4)
    y, _ = conv_forward(x, ConvParams(w, beta, gamma, mean, var), 2, 1, "leaky")
    np.testing.assert_allclose(y, conv_bn_leaky(x, w, gamma, beta, mean, var, 2, 1), rtol=1e-12, atol=1e-12)


def test_conv_plain_bias(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 1, 1))
    b = rng.standard_normal(3)
    y, _ = conv_forward(x, ConvParams(w, b), 1, 0, "linear")
    np.testing.assert_allclose(y, direct_conv(x, w, b, 1, 0), rtol=1e-12)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        conv_forward(np.zeros((1, 2, 4, 4)), ConvParams(np.zeros((1, 3, 3, 3)), np.zeros(1)), 1, 1)


def test_conv_backward_needs_cache():
    with pytest.raises(StateError):
        conv_backward(np.zeros((1, 1, 2, 2)), None)


@settings(max_examples=30, deadline=None)
@given(size=st.integers(1, 3), stride=st.integers(1, 3), data=st.data(), seed=st.integers(0, 9999))
def test_maxpool_matches_sliding_oracle(size, stride, data, seed):
    pad = data.draw(st.integers(0, 2 * (size - 1)))
    x = np.random.default_rng(seed).standard_normal((1, 2, 6, 7))
    y, _ = maxpool_forward(x, size, stride, pad)
    assert np.array_equal(y, sliding_max(x, size, stride, pad))


def test_maxpool_rejects_window_outside_input():
    with pytest.raises(ShapeError):
        maxpool_forward(np.zeros((1, 1, 4, 4)), 1, 1, 1)


def test_maxpool_default_padding_keeps_size():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y, _ = maxpool_forward(x, 2, 1)
    assert y.shape == (1, 1, 4, 4)


def test_maxpool_tie_goes_to_first_index():
    x = np.ones((1, 1, 2, 2))
    y, cache = maxpool_forward(x, 2, 2, 0)
    dx = maxpool_backward(np.ones_like(y), cache)
    assert np.array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    y, cache = maxpool_forward(x, 2, 2, 0)
    assert y[0, 0, 0, 0] == 5.0
    assert np.array_equal(maxpool_backward(np.full(y.shape, 2.0), cache)[0, 0], [[0, 2], [0, 0]])


def test_upsample_nearest():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    y = upsample_forward(x, 2)
    assert np.array_equal(y[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    assert np.array_equal(upsample_backward(np.ones_like(y), 2), np.full(x.shape, 4.0))


def test_route_concat_and_split(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
    y = route_forward([a, b])
    assert y.shape == (2, 8, 4, 4)
    ga, gb = route_backward(y, [3, 5])
    assert np.array_equal(ga, a) and np.array_equal(gb, b)


def test_reference_heads_at_416(ref_cfg):
    heads = forward_pass(ref_cfg, zero_weights(ref_cfg), np.zeros((1, 3, 416, 416), np.float32))
    assert [h.output.shape for h in heads] == [(1, 33, 13, 13), (1, 33, 26, 26)]
    assert all(not h.output.any() for h in heads)


def test_network_rejects_wrong_input(micro):
    net = Network(micro, zero_weights(micro))
    with pytest.raises(ShapeError, match="does not match"):
        net.forward(np.zeros((1, 3, 16, 16), np.float32))


def test_backward_before_forward(micro):
    with pytest.raises(StateError):
        Network(micro, zero_weights(micro)).backward([np.zeros((1, 11, 4, 4))])


def test_float32_forward_tracks_float64(micro, rng):
    w64 = init_weights(micro, 3, np.float64)
    w32 = init_weights(micro, 3, np.float32)
    x = rng.uniform(0, 1, (2, 3, 32, 32))
    y64 = Network(micro, w64).forward(x)[0].output
    y32 = Network(micro, w32).forward(x.astype(np.float32))[0].output
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, y64, rtol=1e-3, atol=1e-4)


def test_multi_consumer_gradients_accumulate():
    # layer 0 feeds both layer 1 and the route; its gradient is the sum of both paths
    text = ("[net]\nwidth=4\nheight=4\nchannels=1\n"
            "[convolutional]\nfilters=2\nsize=1\nactivation=linear\n"
            "[convolutional]\nfilters=2\nsize=1\nactivation=linear\n"
            "[route]\nlayers=-1,-2\n"
            "[convolutional]\nfilters=6\nsize=1\nactivation=linear\n"
            "[yolo]\nmask=0\nanchors=1,1\nclasses=1\n")
    cfg = parse_cfg(text)
    rng = np.random.default_rng(0)
    w = init_weights(cfg, 0, np.float64)
    net = Network(cfg, w)
    x = rng.standard_normal((1, 1, 4, 4))
    r = rng.standard_normal((1, 6, 4, 4))
    net.forward(x, train=True)
    grads = net.backward([r])

    def loss():
        return float(np.sum(r * net.forward(x)[0].output))

    num = gradcheck.numeric_grad(loss, w.convs[0].weights)
    np.testing.assert_allclose(grads[0].weights, num, rtol=1e-7)


@pytest.mark.parametrize("check", [gradcheck.check_conv, gradcheck.check_maxpool,
                                   gradcheck.check_upsample, gradcheck.check_route])
def test_layer_gradients_match_finite_differences(check):
    result = check(np.random.default_rng(11), draws=5)
    assert result.max_error <= gradcheck.TOLERANCE


def test_pool_gap_detects_near_tie():
    x = np.array([[[[1.0, 1.0 + 1e-6], [0.0, 0.0]]]])
    assert gradcheck._pool_gap(x, 2, 2, 0) < gradcheck.KINK_MARGIN
