"""The vocoder: frame-rate upsampling network plus the autoregressive sample network."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit

from . import grad as G
from . import lpmdn
from .dsp import AudioBuffer, LpFilter, predict_sample, push_history
from .net import Conv1dLayer, FcLayer, GruLayer, TransposedConvLayer, gru_sequence

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    feature_dim: int = 19
    context_dim: int = 128
    gru1_dim: int = 256
    gru2_dim: int = 16
    mixtures: int = 1
    frame_shift: int = 120
    lp_order: int = 16

    def __post_init__(self):
        for f in fields(self):
            if int(getattr(self, f.name)) < 1:
                raise ValueError(f"ModelConfig.{f.name} must be >= 1")
            setattr(self, f.name, int(getattr(self, f.name)))
        if self.feature_dim != self.lp_order + 3:
            raise ValueError(
                f"feature_dim {self.feature_dim} != lp_order + 3 = {self.lp_order + 3}")

    @classmethod
    def desk(cls, lp_order=16, **kw):
        """Small preset used for CPU-scale training."""
        return cls(feature_dim=lp_order + 3, lp_order=lp_order, gru1_dim=64, gru2_dim=8, **kw)

    @classmethod
    def full(cls, lp_order=16, **kw):
        """Full-size preset: 256-wide context and GRU 256/16."""
        return cls(feature_dim=lp_order + 3, lp_order=lp_order, context_dim=256,
                   gru1_dim=256, gru2_dim=16, **kw)

    @property
    def head_dim(self):
        return 2 if self.mixtures == 1 else 3 * self.mixtures

    def to_dict(self):
        return asdict(self)


def lp_predictions(x_ext, lp_rows):
    """``p[b, n] = sum_i lp_rows[b, n, i] * x_ext[b, M + n - 1 - i]``.

    ``x_ext`` holds the ``M`` history samples followed by the ``L`` chunk
    samples; ``lp_rows`` is (B, L, M).
    """
    x_ext = np.asarray(x_ext, dtype=np.float64)
    lp_rows = np.asarray(lp_rows, dtype=np.float64)
    L, M = lp_rows.shape[-2], lp_rows.shape[-1]
    if x_ext.shape[-1] != L + M:
        raise G.ShapeError(f"history+samples length {x_ext.shape[-1]} != {L} + {M}")
    win = np.lib.stride_tricks.sliding_window_view(x_ext, M, axis=-1)[..., :L, ::-1]
    return np.einsum("...nm,...nm->...n", win, lp_rows)


class Vocoder:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        F, C = cfg.feature_dim, cfg.context_dim
        self.conv1 = Conv1dLayer(F, F, rng, name="up.conv1")
        self.conv2 = Conv1dLayer(F, F, rng, name="up.conv2")
        self.fc_up = FcLayer(F, C, rng, name="up.fc")
        self.tconv = TransposedConvLayer(C, C, cfg.frame_shift, rng, name="up.tconv")
        self.gru1 = GruLayer(C + 1, cfg.gru1_dim, rng, name="gen.gru1")
        self.gru2 = GruLayer(cfg.gru1_dim, cfg.gru2_dim, rng, name="gen.gru2")
        self.fc_out = FcLayer(cfg.gru2_dim, cfg.head_dim, rng, name="gen.fc")
        self.feat_mean = np.zeros(F)
        self.feat_std = np.ones(F)
        self.loaded = False

    # ------------------------------------------------------------- params
    def named_parameters(self):
        out = []
        for layer in (self.conv1, self.conv2, self.fc_up, self.tconv,
                      self.gru1, self.gru2, self.fc_out):
            for p in layer.parameters():
                out.append((p.name, p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def buffers(self):
        return {"norm.mean": self.feat_mean, "norm.std": self.feat_std}

    def fit_normalization(self, tracks):
        rows = np.concatenate([t.features for t in tracks], axis=0)
        self.feat_mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        self.feat_std = np.where(std > 1e-8, std, 1.0)

    # ------------------------------------------------------------ forward
    def _check_features(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.cfg.feature_dim:
            raise G.ShapeError(
                f"feature dim {features.shape[-1] if features.ndim else None} != model feature_dim {self.cfg.feature_dim}")
        return features

    def frame_context(self, features):
        """Conv stack with residual, then FC: (T, F) -> (T, context_dim)."""
        x = G.Tensor((self._check_features(features) - self.feat_mean) / self.feat_std)
        h = G.tanh(self.conv1(x))
        h = G.tanh(self.conv2(h))
        return self.fc_up(G.add(h, x))

    def upsample_forward(self, features):
        """Per-sample context rows, (T * frame_shift, context_dim)."""
        return self.tconv(self.frame_context(features))

    def chunk_context(self, features_list, start_frames, n_frames):
        """Context rows for a batch of frame-aligned chunks, (B, n_frames * shift, C).

        The frame-level stack runs over each whole utterance so chunk edges see
        their true neighbouring frames.
        """
        cache = {}
        rows = []
        for feats, start in zip(features_list, start_frames):
            key = id(feats)
            if key not in cache:
                cache[key] = self.frame_context(feats)
            rows.append(cache[key][start:start + n_frames])
        return self.tconv(G.stack(rows, axis=0))

    def wavegen_heads(self, context, x_prev):
        """Raw heads (..., L, head_dim) from context rows and previous samples."""
        x_prev = np.asarray(x_prev, dtype=np.float64)
        inp = G.concat([G.tanh(context), G.Tensor(x_prev[..., None])], axis=-1)
        squeeze = inp.ndim == 2
        if squeeze:
            inp = G.reshape(inp, (1, *inp.shape))
        h1 = gru_sequence(self.gru1, inp)
        h2 = gru_sequence(self.gru2, h1)
        out = self.fc_out(h2)
        if squeeze:
            out = G.reshape(out, out.shape[1:])
        return lpmdn.NetHeads.split(out, self.cfg.mixtures)

    def wavegen_forward(self, context, samples, lp_rows, history=None, conditioning=None):
        """Teacher-forced speech distribution and mean NLL over the chunk.

        ``conditioning`` (history + samples, possibly noise-injected) feeds both
        the GRU input and the LP prediction; the clean ``samples`` are targets.
        Returns ``(nll, mog)``.
        """
        samples = np.asarray(samples, dtype=np.float64)
        lp_rows = np.asarray(lp_rows, dtype=np.float64)
        M = self.cfg.lp_order
        L = samples.shape[-1]
        if context.shape[-2] != L or lp_rows.shape[-2] != L:
            raise G.ShapeError(
                f"length mismatch: context {context.shape[-2]}, samples {L}, lp rows {lp_rows.shape[-2]}")
        if history is None:
            history = np.zeros((*samples.shape[:-1], M))
        if conditioning is None:
            conditioning = np.concatenate([history, samples], axis=-1)
        p = lp_predictions(conditioning, lp_rows)
        heads = self.wavegen_heads(context, conditioning[..., M - 1:M - 1 + L])
        mog = lpmdn.heads_to_mog(heads, p)
        return lpmdn.mog_nll(mog, samples), mog

    # ---------------------------------------------------------- synthesis
    def synthesize(self, track, seed=0, sharpen_factor=0.7, voiced=None):
        """Free-running generation, one sample at a time.

        The LP prediction uses the model's own emitted samples.  ``voiced``
        optionally overrides which frames get sharpened (defaults to the
        track's voicing flags).  Uniform and normal draws for the whole
        utterance are taken from ``default_rng(seed)`` up front.
        """
        if not self.loaded:
            raise RuntimeError("synthesize: model has no trained or loaded parameters")
        cfg = self.cfg
        S, M, N = cfg.frame_shift, cfg.lp_order, cfg.mixtures
        T = track.n_frames
        if T == 0:
            return AudioBuffer(np.zeros(0), track.sample_rate)
        if track.lp_order != M:
            raise G.ShapeError(f"track lp order {track.lp_order} != model lp_order {M}")
        if not sharpen_factor > 0:
            raise ValueError("sharpen_factor must be > 0")
        flags = track.voicing if voiced is None else np.asarray(voiced, dtype=np.float64)
        if flags.shape != (T,):
            raise G.ShapeError(f"voicing override shape {flags.shape} != ({T},)")
        frame_scale = np.where(flags > 0.5, sharpen_factor, 1.0)

        with G.no_grad():
            ctx = self.upsample_forward(track.features).data
        C = cfg.context_dim
        W1 = self.gru1.W.data
        xw1_ctx = np.tanh(ctx) @ W1[:C] + self.gru1.b.data
        w1_prev = W1[C].copy()
        g1 = _GruNumpy(self.gru1)
        g2 = _GruNumpy(self.gru2)
        W2, b2 = self.gru2.W.data, self.gru2.b.data
        Wo, bo = self.fc_out.numpy_weight(), self.fc_out.bias.data

        n_total = T * S
        rng = np.random.default_rng(seed)
        uniforms = rng.random(n_total)
        normals = rng.standard_normal(n_total)
        out = np.empty(n_total)
        filt = LpFilter(track.lp_coeffs[0])
        h1 = np.zeros(cfg.gru1_dim)
        h2 = np.zeros(cfg.gru2_dim)
        x_prev = 0.0
        clamped = 0
        lo, hi = lpmdn.LOG_SCALE_MIN, lpmdn.LOG_SCALE_MAX
        for n in range(n_total):
            f = n // S
            if n % S == 0:
                filt.coeffs = track.lp_coeffs[f]
            p = predict_sample(filt)
            h1 = g1.step(xw1_ctx[n] + x_prev * w1_prev, h1)
            h2 = g2.step(h1 @ W2 + b2, h2)
            z = h2 @ Wo + bo
            if N == 1:
                k = 0
                z_mu, z_s = z[0], z[1]
            else:
                w = np.exp(z[:N] - z[:N].max())
                w /= w.sum()
                k = min(int((uniforms[n] >= np.cumsum(w)).sum()), N - 1)
                z_mu, z_s = z[N + k], z[2 * N + k]
            scale = math.exp(min(max(z_s, lo), hi)) * frame_scale[f]
            x = z_mu + p + scale * normals[n]
            if x > 1.0 or x < -1.0:
                clamped += 1
                x = 1.0 if x > 1.0 else -1.0
            push_history(filt, x)
            out[n] = x
            x_prev = x
        if clamped:
            log.info("synthesize: clamped %d of %d samples to [-1, 1]", clamped, n_total)
        return AudioBuffer(out, track.sample_rate)


class _GruNumpy:
    """Single-stream GRU cell on plain arrays for the synthesis loop."""

    def __init__(self, layer):
        H = layer.hidden
        self.H = H
        self.Uzr = np.ascontiguousarray(layer.U.data[:, :2 * H])
        self.Uh = np.ascontiguousarray(layer.U.data[:, 2 * H:])

    def step(self, xw, h):
        H = self.H
        zr = expit(xw[:2 * H] + h @ self.Uzr)
        c = np.tanh(xw[2 * H:] + (zr[H:] * h) @ self.Uh)
        return h + zr[:H] * (c - h)
