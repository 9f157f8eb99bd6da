"""Compiled inner loops: the GRU recurrence (forward and BPTT) and the Adam update.

Time-major layout throughout: inputs are (L, B, 3H).  tanh is evaluated as
``1 - 2 / (exp(2v) + 1)``, which compiles to a much faster loop than the
scalar ``tanh`` intrinsic.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _sigmoid(v):
    if v >= 0.0:
        return 1.0 / (1.0 + np.exp(-v))
    e = np.exp(v)
    return e / (1.0 + e)


@njit(cache=True)
def _tanh(v):
    if v > 20.0:
        return 1.0
    if v < -20.0:
        return -1.0
    if -1e-4 < v < 1e-4:
        v2 = v * v
        return v * (1.0 - v2 / 3.0 + 2.0 * v2 * v2 / 15.0)
    return 1.0 - 2.0 / (np.exp(2.0 * v) + 1.0)


@njit(cache=True)
def gru_forward(xt, Uzr, Uh, h0):
    L, B, H3 = xt.shape
    H = H3 // 3
    hs = np.empty((L + 1, B, H))
    hs[0] = h0
    zr_all = np.empty((L, B, 2 * H))
    c_all = np.empty((L, B, H))
    rh_all = np.empty((L, B, H))
    for t in range(L):
        h = hs[t]
        a = np.dot(h, Uzr)
        for b in range(B):
            for j in range(2 * H):
                zr_all[t, b, j] = _sigmoid(xt[t, b, j] + a[b, j])
            for j in range(H):
                rh_all[t, b, j] = zr_all[t, b, H + j] * h[b, j]
        cc = np.dot(rh_all[t], Uh)
        for b in range(B):
            for j in range(H):
                c = _tanh(xt[t, b, 2 * H + j] + cc[b, j])
                c_all[t, b, j] = c
                hs[t + 1, b, j] = h[b, j] + zr_all[t, b, j] * (c - h[b, j])
    return hs, zr_all, c_all, rh_all


@njit(cache=True)
def gru_backward(g, hs, zr_all, c_all, UzrT, UhT):
    L, B, H = g.shape
    d_zr = np.empty((L, B, 2 * H))
    d_c = np.empty((L, B, H))
    dh_next = np.zeros((B, H))
    dh = np.empty((B, H))
    carry = np.empty((B, H))
    for t in range(L - 1, -1, -1):
        for b in range(B):
            for j in range(H):
                d = g[t, b, j] + dh_next[b, j]
                z = zr_all[t, b, j]
                c = c_all[t, b, j]
                dh[b, j] = d
                d_c[t, b, j] = d * z * (1.0 - c * c)
                d_zr[t, b, j] = d * (c - hs[t, b, j]) * z * (1.0 - z)
                carry[b, j] = d * (1.0 - z)
        drh = np.dot(d_c[t], UhT)
        for b in range(B):
            for j in range(H):
                r = zr_all[t, b, H + j]
                d_zr[t, b, H + j] = drh[b, j] * hs[t, b, j] * r * (1.0 - r)
                carry[b, j] += drh[b, j] * r
        back = np.dot(d_zr[t], UzrT)
        for b in range(B):
            for j in range(H):
                dh_next[b, j] = carry[b, j] + back[b, j]
    return d_zr, d_c, dh_next


@njit(cache=True)
def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """In-place Adam on flat contiguous arrays, same arithmetic as the numpy form."""
    for i in range(p.size):
        gi = g[i]
        m[i] = m[i] * b1 + (1.0 - b1) * gi
        v[i] = v[i] * b2 + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def weight_norm_forward(flat, g):
    """Rows of ``flat`` rescaled to norm ``g``; returns (w, norms)."""
    R, K = flat.shape
    out = np.empty((R, K))
    norms = np.empty(R)
    for i in range(R):
        acc = 0.0
        for k in range(K):
            acc += flat[i, k] * flat[i, k]
        n = np.sqrt(acc)
        norms[i] = n
        s = g[i] / n
        for k in range(K):
            out[i, k] = flat[i, k] * s
    return out, norms


@njit(cache=True)
def weight_norm_backward(gf, flat, g, norms):
    R, K = flat.shape
    dv = np.empty((R, K))
    dg = np.empty(R)
    for i in range(R):
        acc = 0.0
        for k in range(K):
            acc += gf[i, k] * flat[i, k]
        n = norms[i]
        d = acc / n
        dg[i] = d
        s = g[i] / n
        c = d / n
        for k in range(K):
            dv[i, k] = s * (gf[i, k] - flat[i, k] * c)
    return dv, dg
