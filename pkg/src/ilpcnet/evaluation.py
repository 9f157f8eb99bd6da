"""Objective metrics and the finite-difference gradient suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp, lpmdn
from . import grad as G
from .dsp import FrameConfig
from .model import ModelConfig, Vocoder
from .net import Conv1dLayer, FcLayer, GruLayer, TransposedConvLayer, gru_sequence, gru_step
from .trainer import power_loss

LOG_FLOOR = 1e-10


def _samples(a):
    return np.asarray(getattr(a, "samples", a), dtype=np.float64)


def _trim_pair(ref, syn, hop):
    x, y = _samples(ref), _samples(syn)
    if abs(x.size - y.size) > hop:
        raise ValueError(f"length mismatch: {x.size} vs {y.size} samples (more than one frame)")
    n = min(x.size, y.size)
    return x[:n], y[:n]


def log_spectral_distance(ref, syn, fft_size=512, hop=120):
    """Mean over frames of the RMS dB difference between magnitude spectra."""
    x, y = _trim_pair(ref, syn, hop)
    X = 20.0 * np.log10(np.maximum(dsp.stft(x, fft_size, hop), LOG_FLOOR))
    Y = 20.0 * np.log10(np.maximum(dsp.stft(y, fft_size, hop), LOG_FLOOR))
    return float(np.mean(np.sqrt(np.mean((X - Y) ** 2, axis=1))))


@dataclass
class Comparison:
    lsd_db: float
    f0_rmse_hz: float
    voicing_agreement_pct: float
    frames: int
    voiced_frames: int

    def report(self):
        return (f"lsd_db {self.lsd_db:.4f}\n"
                f"f0_rmse_hz {self.f0_rmse_hz:.4f}\n"
                f"voicing_agreement_pct {self.voicing_agreement_pct:.2f}\n"
                f"frames {self.frames}\n"
                f"voiced_frames_both {self.voiced_frames}\n")


def compare_audio(ref, syn, cfg=FrameConfig()):
    """LSD, F0 RMSE over frames voiced in both, and voicing agreement."""
    sr_r = getattr(ref, "sample_rate", cfg.sample_rate)
    sr_s = getattr(syn, "sample_rate", cfg.sample_rate)
    if sr_r != sr_s:
        raise ValueError(f"sample rate mismatch: {sr_r} vs {sr_s}")
    x, y = _trim_pair(ref, syn, cfg.frame_shift)
    f_r, v_r = dsp.estimate_f0(x, cfg)
    f_s, v_s = dsp.estimate_f0(y, cfg)
    both = (v_r == 1) & (v_s == 1)
    rmse = float(np.sqrt(np.mean((f_r[both] - f_s[both]) ** 2))) if both.any() else float("nan")
    return Comparison(log_spectral_distance(x, y, hop=cfg.frame_shift), rmse,
                      float(100.0 * np.mean(v_r == v_s)), int(v_r.size), int(both.sum()))


# -------------------------------------------------------- gradient checks

FD_STEP = 1e-5
GRAD_TOL = 1e-4
COMPONENTS = ("fc", "conv1x3", "tconv", "gru_unroll", "gru_sequence", "weight_norm",
              "mog_nll", "power_loss", "vocoder")


def relative_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(loss_fn, tensor, h=FD_STEP, entries=None):
    """Central differences of ``loss_fn()`` w.r.t. chosen entries of ``tensor``."""
    if not tensor.data.flags.c_contiguous:
        tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.empty(idx.size)
    with G.no_grad():
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            out[j] = (up - down) / (2.0 * h)
    return idx, out


def _weights(rng, shape):
    # fixed random projection so the loss uses every output entry
    return G.Tensor(rng.standard_normal(shape))


def _case(name, rng):
    """``(loss_fn, tensors)`` for one randomized instance of ``name``."""
    if name == "fc":
        layer = FcLayer(4, 3, rng)
        layer.bias.data = rng.standard_normal(3)
        x = G.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        w = _weights(rng, (2, 3))
        return lambda: G.sum(G.mul(G.tanh(layer(x)), w)), [x, *layer.parameters()]
    if name == "conv1x3":
        layer = Conv1dLayer(3, 3, rng)
        x = G.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        w = _weights(rng, (5, 3))
        return lambda: G.sum(G.mul(G.tanh(layer(x)), w)), [x, *layer.parameters()]
    if name == "tconv":
        layer = TransposedConvLayer(3, 2, 4, rng)
        x = G.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        w = _weights(rng, (12, 2))
        return lambda: G.sum(G.mul(G.tanh(layer(x)), w)), [x, *layer.parameters()]
    if name == "gru_unroll":
        layer = GruLayer(3, 4, rng)
        layer.b.data = 0.5 * rng.standard_normal(layer.b.shape)
        xs = G.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        h0 = G.Tensor(0.5 * rng.standard_normal(4), requires_grad=True)
        w = _weights(rng, (3, 4))

        def loss():
            h, total = h0, 0.0
            for t in range(3):
                h, _ = gru_step(layer, h, xs[t])
                total = G.add(G.sum(G.mul(h, w[t])), total)
            return total
        return loss, [xs, h0, *layer.parameters()]
    if name == "gru_sequence":
        layer = GruLayer(3, 4, rng)
        layer.b.data = 0.5 * rng.standard_normal(layer.b.shape)
        xs = G.Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        h0 = G.Tensor(0.5 * rng.standard_normal((2, 4)), requires_grad=True)
        w = _weights(rng, (2, 5, 4))
        return lambda: G.sum(G.mul(gru_sequence(layer, xs, h0), w)), [xs, h0, *layer.parameters()]
    if name == "weight_norm":
        p = G.WeightNormParam(rng.standard_normal((3, 4)))
        p.g.data = rng.uniform(0.5, 2.0, 3)
        w = _weights(rng, (3, 4))
        return lambda: G.sum(G.mul(G.tanh(p.effective()), w)), p.parameters()
    if name == "mog_nll":
        N = 3
        heads = lpmdn.NetHeads(G.Tensor(rng.standard_normal((6, N)), requires_grad=True),
                               G.Tensor(0.5 * rng.standard_normal((6, N)), requires_grad=True),
                               G.Tensor(rng.uniform(-2.0, 1.0, (6, N)), requires_grad=True))
        p = 0.3 * rng.standard_normal(6)
        x = 0.5 * rng.standard_normal(6)
        return (lambda: lpmdn.mog_nll(lpmdn.heads_to_mog(heads, p), x),
                [heads.z_w, heads.z_mu, heads.z_s])
    if name == "power_loss":
        x = 0.3 * rng.standard_normal((2, 128 + 32 * 2))
        x_hat = G.Tensor(0.3 * rng.standard_normal(x.shape), requires_grad=True)
        return lambda: power_loss(x, x_hat, fft_size=128, hop=32), [x_hat]
    if name == "vocoder":
        cfg = ModelConfig(feature_dim=5, context_dim=4, gru1_dim=5, gru2_dim=3,
                          mixtures=2, frame_shift=8, lp_order=2)
        model = Vocoder(cfg, seed=int(rng.integers(1 << 31)))
        feats = rng.standard_normal((4, 5))
        samples = 0.3 * rng.standard_normal(32)
        lp_rows = np.repeat(0.3 * rng.standard_normal((4, 2)), 8, axis=0)
        hist = 0.3 * rng.standard_normal(2)

        def loss():
            ctx = model.upsample_forward(feats)
            nll, mog = model.wavegen_forward(ctx, samples, lp_rows, history=hist)
            return G.add(nll, G.mul(power_loss(samples, mog.mean(), fft_size=16, hop=8), 10.0))
        return loss, model.parameters()
    raise KeyError(f"unknown gradcheck component {name!r}")


@dataclass
class GradcheckRow:
    component: str
    trials: int
    max_rel_error: float
    passed: bool


def check_component(name, trials=10, seed=0, corrupt=False, max_entries=24):
    """Worst elementwise relative error of analytic vs central-difference gradients.

    ``corrupt`` scales the analytic gradient by 1.01, the negative control.
    """
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, COMPONENTS.index(name)])
        loss_fn, tensors = _case(name, rng)
        for t in tensors:
            t.requires_grad = True
        G.zero_grad(tensors)
        G.backward(loss_fn())
        for t in tensors:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
            if corrupt:
                analytic = analytic * 1.01
            entries = None
            if t.size > max_entries:
                entries = np.sort(rng.choice(t.size, max_entries, replace=False))
            idx, num = numeric_grad(loss_fn, t, entries=entries)
            err = relative_error(analytic.reshape(-1)[idx], num)
            worst = max(worst, float(err.max()))
    return GradcheckRow(name, trials, worst, worst < GRAD_TOL)


def gradcheck_suite(trials=10, seed=0, corrupt=None, components=COMPONENTS):
    return [check_component(c, trials, seed, corrupt == c) for c in components]


def format_table(rows):
    lines = [f"{'component':<14} {'trials':>6} {'max_rel_err':>12}  result"]
    for r in rows:
        lines.append(f"{r.component:<14} {r.trials:>6} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
