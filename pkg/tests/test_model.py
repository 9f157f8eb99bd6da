import math
import threading

import numpy as np
import pytest

from ilpcnet import dsp, lpmdn
from ilpcnet import grad as G
from ilpcnet.model import ModelConfig, Vocoder, lp_predictions
from ilpcnet.evaluation import check_component


def tiny_cfg(**kw):
    base = dict(feature_dim=5, context_dim=6, gru1_dim=7, gru2_dim=4, mixtures=1,
                frame_shift=8, lp_order=2)
    base.update(kw)
    return ModelConfig(**base)


def random_track(rng, T, cfg):
    lsf = np.sort(rng.uniform(0.2, 2.9, (T, cfg.lp_order)), axis=1)
    feats = np.column_stack([np.full(T, math.log(150.0)), rng.integers(0, 2, T),
                             rng.standard_normal(T), lsf])
    return dsp.FeatureTrack(feats, sample_rate=24000, frame_shift=cfg.frame_shift)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=10, lp_order=16)
    with pytest.raises(ValueError):
        ModelConfig(gru1_dim=0)
    assert ModelConfig.desk().gru1_dim == 64 and ModelConfig.desk().gru2_dim == 8
    assert ModelConfig().head_dim == 2 and ModelConfig(mixtures=3).head_dim == 9


def test_upsample_length(rng):
    m = Vocoder(ModelConfig.desk(), seed=0)
    ctx = m.upsample_forward(rng.standard_normal((4, 19)))
    assert ctx.shape == (480, 128)


def test_upsample_zero_features_gives_bias_pattern(rng):
    m = Vocoder(tiny_cfg(), seed=0)
    for conv in (m.conv1, m.conv2):
        conv.kernel.g.data[:] = 0.0
    m.tconv.bias.data = rng.standard_normal(6)
    ctx = m.upsample_forward(np.zeros((3, 5))).data
    np.testing.assert_allclose(ctx, np.tile(m.tconv.bias.data, (24, 1)), atol=1e-15)


def test_upsample_receptive_field(rng):
    cfg = tiny_cfg()
    m = Vocoder(cfg, seed=1)
    feats = rng.standard_normal((9, 5))
    base = m.upsample_forward(feats).data
    feats2 = feats.copy()
    feats2[4] += 1.0
    diff = np.abs(m.upsample_forward(feats2).data - base).reshape(9, 8, -1).max(axis=(1, 2))
    assert np.all(diff[2:7] > 0)
    assert np.all(diff[[0, 1, 7, 8]] == 0)


def test_chunk_context_matches_whole_utterance(rng):
    m = Vocoder(tiny_cfg(), seed=2)
    feats = rng.standard_normal((10, 5))
    whole = m.upsample_forward(feats).data
    chunk = m.chunk_context([feats, feats], [3, 6], 4).data
    np.testing.assert_array_equal(chunk[0], whole[24:56])
    np.testing.assert_array_equal(chunk[1], whole[48:80])


def test_lp_predictions_formula(rng):
    x_ext = rng.standard_normal(2 + 5)
    rows = rng.standard_normal((5, 2))
    p = lp_predictions(x_ext, rows)
    for n in range(5):
        assert p[n] == pytest.approx(rows[n, 0] * x_ext[n + 1] + rows[n, 1] * x_ext[n])


def test_zero_predictor_is_plain_mdn(rng):
    cfg = tiny_cfg(mixtures=2)
    m = Vocoder(cfg, seed=3)
    ctx = m.upsample_forward(rng.standard_normal((4, 5)))
    x = 0.3 * rng.standard_normal(32)
    nll, _ = m.wavegen_forward(ctx, x, np.zeros((32, 2)))
    heads = m.wavegen_heads(ctx, np.concatenate(([0.0], x[:-1])))
    plain = lpmdn.mog_nll(lpmdn.heads_to_mog(heads, np.zeros(32)), x)
    assert nll.item() == plain.item()


def test_wavegen_length_mismatch(rng):
    m = Vocoder(tiny_cfg(), seed=0)
    ctx = m.upsample_forward(rng.standard_normal((4, 5)))
    with pytest.raises(G.ShapeError):
        m.wavegen_forward(ctx, np.zeros(31), np.zeros((31, 2)))


def test_full_graph_gradient():
    assert check_component("vocoder", trials=2, seed=4).passed


def test_predictable_signal_beats_best_fixed_gaussian():
    # x_n = 0.9 x_{n-1}: with alpha = [0.9] the excitation is zero
    cfg = ModelConfig(feature_dim=4, context_dim=6, gru1_dim=8, gru2_dim=4,
                      frame_shift=16, lp_order=1)
    m = Vocoder(cfg, seed=0)
    m.loaded = True
    rng = np.random.default_rng(0)
    B, L = 8, 64
    amp = rng.uniform(-0.5, 0.5, (B, 1))
    k = rng.integers(0, 10, (B, 1))
    full = amp * 0.9 ** (k + np.arange(L + 1))
    hist, x = full[:, :1], full[:, 1:]
    rows = np.full((B, L, 1), 0.9)
    feats = [np.zeros((L // 16, 4))] * B
    opt = G.Adam(m.parameters())
    for step in range(1, 301):
        ctx = m.chunk_context(feats, np.zeros(B, dtype=int), L // 16)
        nll, _ = m.wavegen_forward(ctx, x, rows, history=hist)
        opt.zero_grad()
        G.backward(nll)
        opt.step(G.noam_lr(step, 3e-3, 50))
    with G.no_grad():
        ctx = m.chunk_context(feats, np.zeros(B, dtype=int), L // 16)
        nll, mog = m.wavegen_forward(ctx, x, rows, history=hist)
    fixed = 0.5 * math.log(2 * math.pi * math.e * x.var())
    assert nll.item() < fixed
    assert np.abs(mog.numpy().mu[..., 0] - (0.9 * np.concatenate((hist, x[:, :-1]), 1))).max() < 0.05


# -------------------------------------------------------------- synthesis

@pytest.fixture
def loaded_model():
    m = Vocoder(tiny_cfg(), seed=5)
    m.fc_out.bias.data = np.array([0.0, -3.0])
    m.loaded = True
    return m


def test_synthesize_requires_loaded(rng):
    m = Vocoder(tiny_cfg(), seed=0)
    with pytest.raises(RuntimeError):
        m.synthesize(random_track(rng, 3, m.cfg))


def test_synthesize_empty(loaded_model):
    tr = dsp.FeatureTrack(np.zeros((0, 5)), lp_coeffs=np.zeros((0, 2)), frame_shift=8)
    assert loaded_model.synthesize(tr).samples.size == 0


def test_synthesize_length_and_determinism(loaded_model, rng):
    tr = random_track(rng, 6, loaded_model.cfg)
    a = loaded_model.synthesize(tr, seed=3).samples
    b = loaded_model.synthesize(tr, seed=3).samples
    assert a.size == 6 * 8
    assert a.tobytes() == b.tobytes()
    assert np.all(np.abs(a) <= 1.0)
    assert loaded_model.synthesize(tr, seed=4).samples.tobytes() != a.tobytes()


def test_synthesis_inverts_to_its_own_normal_draws(loaded_model, rng):
    m = loaded_model
    tr = random_track(rng, 5, m.cfg)
    y = m.synthesize(tr, seed=11, sharpen_factor=1.0).samples
    with G.no_grad():
        ctx = m.upsample_forward(tr.features)
        _, mog = m.wavegen_forward(ctx, y, tr.sample_lp_rows())
    d = mog.numpy()
    draws = np.random.default_rng(11)
    draws.random(y.size)
    normals = draws.standard_normal(y.size)
    np.testing.assert_allclose((y - d.mu[:, 0]) / d.s[:, 0], normals, atol=1e-9)


def test_sharpen_one_ignores_voicing(loaded_model, rng):
    tr = random_track(rng, 6, loaded_model.cfg)
    a = loaded_model.synthesize(tr, seed=2, sharpen_factor=1.0, voiced=np.ones(6)).samples
    b = loaded_model.synthesize(tr, seed=2, sharpen_factor=1.0, voiced=np.zeros(6)).samples
    assert a.tobytes() == b.tobytes()


def test_sharpening_lowers_variance(loaded_model, rng):
    tr = random_track(rng, 40, loaded_model.cfg)
    v = np.ones(40)
    a = loaded_model.synthesize(tr, seed=2, sharpen_factor=0.7, voiced=v).samples
    b = loaded_model.synthesize(tr, seed=2, sharpen_factor=1.0, voiced=v).samples
    assert a.var() < b.var()


def test_concurrent_streams_match_sequential(loaded_model, rng):
    tracks = [random_track(rng, 4, loaded_model.cfg) for _ in range(2)]
    seq = [loaded_model.synthesize(t, seed=i).samples for i, t in enumerate(tracks)]
    out = [None, None]

    def run(i):
        out[i] = loaded_model.synthesize(tracks[i], seed=i).samples
    threads = [threading.Thread(target=run, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(seq, out):
        assert a.tobytes() == b.tobytes()


def test_synthesize_mixture_model(rng):
    m = Vocoder(tiny_cfg(mixtures=3), seed=6)
    m.loaded = True
    y = m.synthesize(random_track(rng, 3, m.cfg), seed=0).samples
    assert y.size == 24 and np.isfinite(y).all()


def test_synthesize_lp_order_mismatch(loaded_model, rng):
    tr = random_track(rng, 3, tiny_cfg(feature_dim=6, lp_order=3))
    with pytest.raises(G.ShapeError):
        loaded_model.synthesize(tr)
