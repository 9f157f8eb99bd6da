"""Mixture-of-Gaussians output head whose means are shifted by the LP prediction.

The network emits raw head vectors for the *excitation*; adding the
prediction ``p_n`` to every mixture mean turns them into the distribution of
the *speech* sample itself.  Gains and scales are unaffected, so the NLL of
``x`` under the shifted mixture equals the NLL of ``x - p_n`` under the
unshifted one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grad as G

LOG_SCALE_MIN = -7.0
LOG_SCALE_MAX = 5.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class NetHeads:
    """Raw head outputs; ``z_w`` is None for a single Gaussian."""

    z_w: object
    z_mu: object
    z_s: object

    @property
    def mixtures(self):
        return self.z_mu.shape[-1]

    @classmethod
    def split(cls, out, mixtures):
        """Slice a network output ``(..., 2)`` or ``(..., 3N)`` into heads."""
        out = G._as_tensor(out)
        width = out.shape[-1]
        if mixtures == 1:
            if width != 2:
                raise G.ShapeError(f"single-Gaussian head width must be 2, got {width}")
            return cls(None, out[..., 0:1], out[..., 1:2])
        if width != 3 * mixtures:
            raise G.ShapeError(f"head width {width} != 3 x {mixtures} mixtures")
        N = mixtures
        return cls(out[..., :N], out[..., N:2 * N], out[..., 2 * N:])


@dataclass
class MogParams:
    """Mixture over the speech sample.

    When built by :func:`heads_to_mog`, ``shift`` (the prediction, per sample)
    and ``z_mu`` (the excitation means) are kept so the likelihood can be
    evaluated on the residual ``(x - shift) - z_mu`` directly.
    """

    w: object
    mu: object
    s: object
    log_w: object = None
    shift: object = None
    z_mu: object = None

    def numpy(self):
        vals = [None if v is None else np.asarray(getattr(v, "data", v))
                for v in (self.w, self.mu, self.s, self.log_w, self.shift, self.z_mu)]
        return MogParams(*vals)

    def mean(self):
        """Mixture mean ``sum_i w_i mu_i`` (differentiable when built from tensors)."""
        return G.sum(G.mul(self.w, self.mu), axis=-1)


def heads_to_mog(heads, p_n):
    """Speech distribution from excitation heads and the LP prediction ``p_n``.

    ``p_n`` is broadcast over mixtures; it is data, never differentiated.
    """
    z_mu = G._as_tensor(heads.z_mu)
    z_s = G._as_tensor(heads.z_s)
    for name, v in (("z_mu", z_mu), ("z_s", z_s), ("z_w", heads.z_w)):
        if v is not None and not np.isfinite(getattr(v, "data", v)).all():
            raise G.NonFiniteError(f"heads_to_mog: non-finite {name}")
    if heads.z_w is None:
        w = G.Tensor(np.ones(z_mu.shape))
        log_w = G.Tensor(np.zeros(z_mu.shape))
    else:
        w = G.softmax(heads.z_w, axis=-1)
        z_w = G._as_tensor(heads.z_w)
        log_w = G.sub(z_w, G.reshape(G.logsumexp(z_w, axis=-1), (*z_w.shape[:-1], 1)))
    p = np.asarray(p_n, dtype=np.float64)
    p = p[..., None] if p.ndim == z_mu.ndim - 1 else p
    p = np.broadcast_to(p, z_mu.shape)
    mu = G.add(z_mu, G.Tensor(p))
    s = G.exp(G.clip(z_s, LOG_SCALE_MIN, LOG_SCALE_MAX))
    return MogParams(w, mu, s, log_w, p, z_mu)


def mog_log_prob(dist, x):
    """Per-sample ``log sum_i w_i N(x; mu_i, s_i^2)`` via log-sum-exp."""
    x = np.asarray(x, dtype=np.float64)
    if dist.shift is not None and dist.z_mu is not None:
        # residual first: bit-identical to scoring x - p under the unshifted mixture
        e = G.Tensor(x[..., None] - dist.shift)
        dev = G.div(G.sub(e, dist.z_mu), dist.s)
    else:
        x = G.Tensor(np.broadcast_to(x[..., None], dist.mu.shape))
        dev = G.div(G.sub(x, dist.mu), dist.s)
    comp = G.sub(G.mul(G.square(dev), -0.5), G.add(G.log(dist.s), HALF_LOG_2PI))
    log_w = dist.log_w if dist.log_w is not None else G.log(dist.w)
    return G.logsumexp(G.add(log_w, comp), axis=-1)


def mog_nll(dist, x):
    """Mean negative log-likelihood of ``x`` (scalar tensor)."""
    return G.neg(G.mean(mog_log_prob(dist, x)))


def shift_invariance_check(heads, p, x, tol=1e-12):
    """True iff NLL(x | heads shifted by p) == NLL(x - p | unshifted heads)."""
    with G.no_grad():
        shifted = mog_nll(heads_to_mog(heads, p), x).item()
        plain = mog_nll(heads_to_mog(heads, np.zeros_like(np.asarray(p, dtype=np.float64))),
                        np.asarray(x) - np.asarray(p)).item()
    return abs(shifted - plain) <= tol


def mog_sample(dist, rng):
    """Ancestral draw: pick a component by gain, then add scaled Gaussian noise.

    Works on one distribution (1-D params) or a batch (leading axes).
    """
    d = dist.numpy()
    N = d.w.shape[-1]
    lead = d.w.shape[:-1]
    w = d.w.reshape(-1, N)
    u = rng.random(w.shape[0])
    idx = np.minimum((u[:, None] >= np.cumsum(w, axis=-1)).sum(axis=-1), N - 1)
    rows = np.arange(w.shape[0])
    eps = rng.standard_normal(w.shape[0])
    out = d.mu.reshape(-1, N)[rows, idx] + d.s.reshape(-1, N)[rows, idx] * eps
    return float(out[0]) if not lead else out.reshape(lead)


def sharpen(dist, voiced, factor=0.7):
    """Scale every ``s`` by ``factor`` where ``voiced`` is set."""
    if not factor > 0:
        raise ValueError("sharpen: factor must be > 0")
    d = dist.numpy()
    v = np.asarray(voiced, dtype=np.float64)
    mult = np.where(v > 0, factor, 1.0)[..., None]
    return MogParams(d.w, d.mu, d.s * mult, d.log_w, d.shift, d.z_mu)
