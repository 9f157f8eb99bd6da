import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilpcnet import grad as G
from ilpcnet import lpmdn
from ilpcnet.lpmdn import NetHeads
from conftest import fd_check


def _single(mu, log_s):
    return NetHeads(None, G.Tensor(np.array([[mu]])), G.Tensor(np.array([[log_s]])))


def test_standard_normal_nll_values():
    d = lpmdn.heads_to_mog(_single(0.0, 0.0), 0.0)
    assert lpmdn.mog_nll(d, [0.0]).item() == pytest.approx(0.9189385, abs=1e-6)
    assert lpmdn.mog_nll(d, [1.0]).item() == pytest.approx(1.4189385, abs=1e-6)
    assert lpmdn.mog_nll(d, [0.0]).item() == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


def test_equal_twin_mixture_equals_single():
    heads = NetHeads(G.Tensor([[0.0, 0.0]]), G.Tensor([[0.0, 0.0]]), G.Tensor([[0.0, 0.0]]))
    d = lpmdn.heads_to_mog(heads, 0.0)
    assert lpmdn.mog_nll(d, [1.0]).item() == pytest.approx(1.4189385, abs=1e-6)


def test_shift_moves_mean_only():
    heads = NetHeads(G.Tensor([[0.3, -0.2]]), G.Tensor([[0.1, -0.4]]), G.Tensor([[-1.0, 0.5]]))
    d0 = lpmdn.heads_to_mog(heads, 0.0).numpy()
    d1 = lpmdn.heads_to_mog(heads, 0.7).numpy()
    np.testing.assert_allclose(d1.mu - d0.mu, 0.7, atol=1e-15)
    np.testing.assert_array_equal(d1.w, d0.w)
    np.testing.assert_array_equal(d1.s, d0.s)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 100_000))
def test_shift_identity(N, seed):
    rng = np.random.default_rng(seed)
    shape = (3, N)
    heads = NetHeads(None if N == 1 else G.Tensor(rng.standard_normal(shape)),
                     G.Tensor(rng.standard_normal(shape)), G.Tensor(rng.uniform(-3, 2, shape)))
    p, x = rng.standard_normal(3), rng.standard_normal(3)
    assert lpmdn.shift_invariance_check(heads, p, x)


def test_split_widths():
    h = NetHeads.split(G.Tensor(np.zeros((4, 2))), 1)
    assert h.z_w is None and h.z_mu.shape == (4, 1)
    h = NetHeads.split(G.Tensor(np.arange(9.0).reshape(1, 9)), 3)
    np.testing.assert_array_equal(h.z_w.data, [[0, 1, 2]])
    np.testing.assert_array_equal(h.z_s.data, [[6, 7, 8]])
    with pytest.raises(G.ShapeError):
        NetHeads.split(G.Tensor(np.zeros((4, 5))), 2)


def test_scale_clamp_keeps_nll_finite():
    d = lpmdn.heads_to_mog(_single(0.0, -50.0), 0.0)
    assert d.numpy().s[0, 0] == pytest.approx(math.exp(lpmdn.LOG_SCALE_MIN))
    assert math.isfinite(lpmdn.mog_nll(d, [1e-3]).item())
    d = lpmdn.heads_to_mog(_single(0.0, 50.0), 0.0)
    assert d.numpy().s[0, 0] == pytest.approx(math.exp(lpmdn.LOG_SCALE_MAX))


def test_non_finite_heads_rejected():
    with pytest.raises(G.NonFiniteError):
        lpmdn.heads_to_mog(NetHeads(None, np.array([[np.nan]]), np.array([[0.0]])), 0.0)


def test_far_components_stay_finite():
    # one component is astronomically unlikely; log-sum-exp must not underflow to -inf
    heads = NetHeads(G.Tensor([[0.0, -700.0]]), G.Tensor([[0.0, 30.0]]), G.Tensor([[-7.0, -7.0]]))
    d = lpmdn.heads_to_mog(heads, 0.0)
    assert math.isfinite(lpmdn.mog_nll(d, [30.0]).item())


def test_nll_grad_mixture(rng):
    heads = NetHeads(G.Tensor(rng.standard_normal((5, 3)), requires_grad=True),
                     G.Tensor(rng.standard_normal((5, 3)), requires_grad=True),
                     G.Tensor(rng.uniform(-2, 1, (5, 3)), requires_grad=True))
    p, x = rng.standard_normal(5), rng.standard_normal(5)
    fd_check(lambda: lpmdn.mog_nll(lpmdn.heads_to_mog(heads, p), x), [heads.z_w, heads.z_mu, heads.z_s])


def test_sample_moments():
    d = lpmdn.heads_to_mog(NetHeads(None, G.Tensor(np.full((100_000, 1), 0.3)),
                                    G.Tensor(np.full((100_000, 1), math.log(0.2)))), 0.0)
    x = lpmdn.mog_sample(d, np.random.default_rng(0))
    assert abs(x.mean() - 0.3) < 0.002
    assert abs(x.std() - 0.2) < 0.002


def test_sample_mixture_weights():
    n = 50_000
    heads = NetHeads(G.Tensor(np.tile(np.log([0.2, 0.8]), (n, 1))),
                     G.Tensor(np.tile([-5.0, 5.0], (n, 1))), G.Tensor(np.full((n, 2), -4.0)))
    x = lpmdn.mog_sample(lpmdn.heads_to_mog(heads, 0.0), np.random.default_rng(1))
    assert abs(np.mean(x < 0) - 0.2) < 0.01


def test_single_draw_is_scalar():
    d = lpmdn.MogParams(np.array([1.0]), np.array([0.5]), np.array([0.1]))
    assert isinstance(lpmdn.mog_sample(d, np.random.default_rng(0)), float)


def test_sharpen():
    d = lpmdn.MogParams(np.array([[0.4, 0.6]]), np.array([[0.1, -0.2]]), np.array([[0.2, 0.5]]))
    np.testing.assert_allclose(lpmdn.sharpen(d, [1]).s, [[0.14, 0.35]])
    np.testing.assert_array_equal(lpmdn.sharpen(d, [0]).s, d.s)
    out = lpmdn.sharpen(d, [1])
    np.testing.assert_array_equal(out.w, d.w)
    np.testing.assert_array_equal(out.mu, d.mu)
    with pytest.raises(ValueError):
        lpmdn.sharpen(d, [1], factor=0.0)


def test_sharpen_variance_ratio():
    n = 100_000
    heads = NetHeads(None, G.Tensor(np.zeros((n, 1))), G.Tensor(np.full((n, 1), math.log(0.2))))
    d = lpmdn.heads_to_mog(heads, 0.0)
    plain = lpmdn.mog_sample(d, np.random.default_rng(7))
    sharp = lpmdn.mog_sample(lpmdn.sharpen(d, np.ones(n)), np.random.default_rng(7))
    assert sharp.var() / plain.var() == pytest.approx(0.49, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_sharpen_preserves_argmax_weight(N, seed):
    rng = np.random.default_rng(seed)
    d = lpmdn.MogParams(rng.dirichlet(np.ones(N), 4), rng.standard_normal((4, N)),
                        rng.uniform(0.01, 1, (4, N)))
    out = lpmdn.sharpen(d, rng.integers(0, 2, 4))
    np.testing.assert_array_equal(out.w.argmax(-1), d.w.argmax(-1))
