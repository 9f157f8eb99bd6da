import numpy as np
import pytest

from ilpcnet import grad as G
from ilpcnet import net
from conftest import fd_check


def test_fc_matches_affine(rng):
    w, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    layer = net.FcLayer(4, 3, weight=w, bias=b)
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(layer(x).data, x @ w + b, atol=1e-13)


def test_fc_grad(rng):
    layer = net.FcLayer(4, 3, rng)
    layer.bias.data = rng.standard_normal(3)
    x = G.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    w = rng.standard_normal((2, 3))
    fd_check(lambda: G.sum(G.mul(G.tanh(layer(x)), w)), [x, *layer.parameters()])


def test_fc_shape_error(rng):
    with pytest.raises(G.ShapeError):
        net.FcLayer(4, 3, rng)(np.zeros((2, 5)))


def test_conv_matches_direct_formula(rng):
    k, b = rng.standard_normal((3, 2, 4)), rng.standard_normal(4)
    layer = net.Conv1dLayer(2, 4, kernel=k, bias=b)
    x = rng.standard_normal((6, 2))
    xp = np.vstack([x[:1], x, x[-1:]])
    expect = np.stack([xp[t] @ k[0] + xp[t + 1] @ k[1] + xp[t + 2] @ k[2] + b for t in range(6)])
    np.testing.assert_allclose(layer(x).data, expect, atol=1e-13)


def test_conv_grad(rng):
    layer = net.Conv1dLayer(3, 2, rng)
    x = G.Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
    w = rng.standard_normal((2, 4, 2))
    fd_check(lambda: G.sum(G.mul(G.tanh(layer(x)), w)), [x, *layer.parameters()])


def test_conv_single_frame(rng):
    k = rng.standard_normal((3, 2, 2))
    layer = net.Conv1dLayer(2, 2, kernel=k)
    x = rng.standard_normal((1, 2))
    np.testing.assert_allclose(layer(x).data, x @ (k[0] + k[1] + k[2]), atol=1e-13)


def test_tconv_upsamples_by_stride(rng):
    k, b = rng.standard_normal((5, 3, 2)), rng.standard_normal(2)
    layer = net.TransposedConvLayer(3, 2, 5, kernel=k, bias=b)
    x = rng.standard_normal((4, 3))
    y = layer(x).data
    assert y.shape == (20, 2)
    for t in range(4):
        for s in range(5):
            np.testing.assert_allclose(y[t * 5 + s], x[t] @ k[s] + b, atol=1e-13)
    np.testing.assert_allclose(layer.numpy_kernel(), k, atol=1e-14)


def test_tconv_grad(rng):
    layer = net.TransposedConvLayer(3, 2, 4, rng)
    x = G.Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    w = rng.standard_normal((2, 12, 2))
    fd_check(lambda: G.sum(G.mul(G.tanh(layer(x)), w)), [x, *layer.parameters()])


def _gru_reference(W, U, b, xs, h):
    H = h.size
    sig = lambda v: 1 / (1 + np.exp(-v))
    out = []
    for x in xs:
        xw = x @ W + b
        z = sig(xw[:H] + h @ U[:, :H])
        r = sig(xw[H:2 * H] + h @ U[:, H:2 * H])
        c = np.tanh(xw[2 * H:] + (r * h) @ U[:, 2 * H:])
        h = (1 - z) * h + z * c
        out.append(h)
    return np.array(out)


def test_gru_step_matches_reference(rng):
    layer = net.GruLayer(3, 4, rng)
    layer.b.data = rng.standard_normal(12)
    xs = rng.standard_normal((5, 3))
    h = np.zeros(4)
    got = []
    for x in xs:
        h, _ = net.gru_step(layer, h, x)
        got.append(h.data)
    expect = _gru_reference(layer.W.data, layer.U.data, layer.b.data, xs, np.zeros(4))
    np.testing.assert_allclose(np.array(got), expect, atol=1e-14)


def test_gru_three_step_unroll_grad(rng):
    layer = net.GruLayer(3, 4, rng)
    layer.b.data = 0.5 * rng.standard_normal(12)
    xs = G.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    h0 = G.Tensor(0.5 * rng.standard_normal(4), requires_grad=True)
    w = rng.standard_normal((3, 4))

    def loss():
        h, total = h0, 0.0
        for t in range(3):
            h, _ = net.gru_step(layer, h, xs[t])
            total = G.add(G.sum(G.mul(h, w[t])), total)
        return total
    fd_check(loss, [xs, h0, *layer.parameters()])


def test_fused_sequence_equals_unrolled_steps(rng):
    layer = net.GruLayer(3, 5, rng)
    layer.b.data = rng.standard_normal(15)
    xs = rng.standard_normal((2, 7, 3))
    w = rng.standard_normal((2, 7, 5))
    xa = G.Tensor(xs, requires_grad=True)
    fused = net.gru_sequence(layer, xa)
    G.backward(G.sum(G.mul(fused, w)))
    g_fused = [p.grad.copy() for p in layer.parameters()] + [xa.grad.copy()]
    G.zero_grad(layer.parameters())

    xb = G.Tensor(xs, requires_grad=True)
    h = G.Tensor(np.zeros((2, 5)))
    total = 0.0
    for t in range(7):
        h, _ = net.gru_step(layer, h, xb[:, t])
        total = G.add(G.sum(G.mul(h, w[:, t])), total)
        np.testing.assert_allclose(fused.data[:, t], h.data, atol=1e-14)
    G.backward(total)
    g_steps = [p.grad for p in layer.parameters()] + [xb.grad]
    for a, b in zip(g_fused, g_steps):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_gru_sequence_grad(rng):
    layer = net.GruLayer(2, 3, rng)
    xs = G.Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
    h0 = G.Tensor(0.3 * rng.standard_normal((2, 3)), requires_grad=True)
    w = rng.standard_normal((2, 4, 3))
    fd_check(lambda: G.sum(G.mul(net.gru_sequence(layer, xs, h0), w)), [xs, h0, *layer.parameters()])


def test_gru_zero_init_state_stays_zero():
    layer = net.GruLayer(2, 3)
    out = net.gru_sequence(layer, np.ones((1, 5, 2)))
    # zero weights: candidate 0, z = 0.5, so h stays at 0
    np.testing.assert_array_equal(out.data, 0.0)


def test_gru_shape_errors(rng):
    layer = net.GruLayer(2, 3, rng)
    with pytest.raises(G.ShapeError):
        net.gru_sequence(layer, np.zeros((4, 2)))
    with pytest.raises(G.ShapeError):
        net.gru_step(layer, np.zeros(2), np.zeros(2))
