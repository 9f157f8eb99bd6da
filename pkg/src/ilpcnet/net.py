"""Layers of the vocoder: FC, 1x3 conv, transposed conv and GRU.

FC and convolution weights are weight-normalized; GRU matrices are plain.
Every layer accepts inputs with any number of leading batch axes.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from . import grad as G
from .grad import Tensor, WeightNormParam


class FcLayer:
    def __init__(self, in_dim, out_dim, rng=None, weight=None, bias=None, name="fc"):
        if weight is None:
            weight = G.xavier_init((in_dim, out_dim), rng).data
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != (in_dim, out_dim):
            raise G.ShapeError(f"fc weight shape {weight.shape} != {(in_dim, out_dim)}")
        self.in_dim, self.out_dim = in_dim, out_dim
        # rows of v are output units
        self.weight = WeightNormParam(weight.T, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim) if bias is None else bias,
                           requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [*self.weight.parameters(), self.bias]

    def __call__(self, x):
        return fc_forward(self, x)

    def numpy_weight(self):
        return self.weight.effective_numpy().T


def fc_forward(layer, x):
    x = G._as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise G.ShapeError(f"fc: input shape {x.shape} and weight ({layer.in_dim}, {layer.out_dim})")
    w = G.transpose(layer.weight.effective())
    return G.add(G.matmul(x, w), layer.bias)


class Conv1dLayer:
    """Width-3 convolution over frames with edge replication.

    ``y[t] = K[0] x[t-1] + K[1] x[t] + K[2] x[t+1] + b``.
    """

    width = 3

    def __init__(self, in_ch, out_ch, rng=None, kernel=None, bias=None, name="conv"):
        if kernel is None:
            kernel = G.xavier_init((3 * in_ch, out_ch), rng).data.reshape(3, in_ch, out_ch)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.shape != (3, in_ch, out_ch):
            raise G.ShapeError(f"conv kernel shape {kernel.shape} != {(3, in_ch, out_ch)}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = WeightNormParam(kernel.transpose(2, 0, 1), name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(out_ch) if bias is None else bias,
                           requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [*self.kernel.parameters(), self.bias]

    def __call__(self, frames):
        return conv1x3_forward(self, frames)


def conv1x3_forward(layer, frames):
    frames = G._as_tensor(frames)
    if frames.ndim < 2 or frames.shape[-1] != layer.in_ch:
        raise G.ShapeError(f"conv1x3: input shape {frames.shape} and kernel (3, {layer.in_ch}, {layer.out_ch})")
    T = frames.shape[-2]
    if T < 1:
        raise G.ShapeError("conv1x3: need at least one frame")
    idx = np.concatenate(([0], np.arange(T), [T - 1]))
    padded = G.take(frames, idx, axis=frames.ndim - 2)
    taps = [padded[..., k:k + T, :] for k in range(3)]
    stacked = G.concat(taps, axis=-1)
    k_eff = G.reshape(layer.kernel.effective(), (layer.out_ch, 3 * layer.in_ch))
    return G.add(G.matmul(stacked, G.transpose(k_eff)), layer.bias)


class TransposedConvLayer:
    """Non-overlapping upsampler: kernel width equals stride.

    With width == stride every output row ``(t, s)`` depends on frame ``t``
    only, so the layer is ``S * O`` linear units applied to each frame.  ``v``
    is stored as (S * O, C), one row per unit, and weight norm runs per row.
    ``kernel`` may be given as (S, C, O).
    """

    def __init__(self, in_ch, out_ch, stride=120, rng=None, kernel=None, bias=None, name="tconv"):
        if kernel is None:
            kernel = G.xavier_init((in_ch, stride * out_ch), rng).data.reshape(in_ch, stride, out_ch)
            kernel = kernel.transpose(1, 0, 2)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.shape != (stride, in_ch, out_ch):
            raise G.ShapeError(f"tconv kernel shape {kernel.shape} != {(stride, in_ch, out_ch)}")
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        rows = kernel.transpose(0, 2, 1).reshape(stride * out_ch, in_ch)
        self.kernel = WeightNormParam(rows, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(out_ch) if bias is None else bias,
                           requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [*self.kernel.parameters(), self.bias]

    def __call__(self, frames):
        return transposed_conv_forward(self, frames)

    def numpy_kernel(self):
        """Effective kernel as (S, C, O)."""
        S, C, O = self.stride, self.in_ch, self.out_ch
        return self.kernel.effective_numpy().reshape(S, O, C).transpose(0, 2, 1)


def transposed_conv_forward(layer, frames):
    frames = G._as_tensor(frames)
    if frames.ndim < 2 or frames.shape[-1] != layer.in_ch:
        raise G.ShapeError(
            f"transposed conv: input shape {frames.shape} and kernel ({layer.stride}, {layer.in_ch}, {layer.out_ch})")
    S, O = layer.stride, layer.out_ch
    y = G.matmul(frames, G.transpose(layer.kernel.effective()))
    lead = frames.shape[:-2]
    T = frames.shape[-2]
    # unit index is s * O + o, so this reshape is a view
    y = G.reshape(y, (*lead, T * S, O))
    return G.add(y, layer.bias)


class GruLayer:
    """GRU with gate blocks ordered [update z, reset r, candidate]."""

    def __init__(self, in_dim, hidden, rng=None, name="gru"):
        self.in_dim, self.hidden = in_dim, hidden
        if rng is None:
            W = np.zeros((in_dim, 3 * hidden))
            U = np.zeros((hidden, 3 * hidden))
        else:
            W = np.concatenate([G.xavier_init((in_dim, hidden), rng).data for _ in range(3)], axis=1)
            U = np.concatenate([G.xavier_init((hidden, hidden), rng).data for _ in range(3)], axis=1)
        self.W = Tensor(W, requires_grad=True, name=f"{name}.W")
        self.U = Tensor(U, requires_grad=True, name=f"{name}.U")
        self.b = Tensor(np.zeros(3 * hidden), requires_grad=True, name=f"{name}.b")

    def parameters(self):
        return [self.W, self.U, self.b]

    def initial_state(self, batch_shape=()):
        return np.zeros((*batch_shape, self.hidden))


def gru_step(layer, state, x):
    """One GRU update built from primitive ops; returns ``(h_new, h_new)``."""
    H = layer.hidden
    state, x = G._as_tensor(state), G._as_tensor(x)
    if x.shape[-1] != layer.in_dim or state.shape[-1] != H:
        raise G.ShapeError(f"gru_step: input {x.shape} / state {state.shape} vs layer ({layer.in_dim}, {H})")
    xw = G.add(G.matmul(x, layer.W), layer.b)
    hu = G.matmul(state, layer.U[:, : 2 * H])
    z = G.sigmoid(G.add(xw[..., :H], hu[..., :H]))
    r = G.sigmoid(G.add(xw[..., H:2 * H], hu[..., H:]))
    cand = G.tanh(G.add(xw[..., 2 * H:], G.matmul(G.mul(r, state), layer.U[:, 2 * H:])))
    h_new = G.add(state, G.mul(z, G.sub(cand, state)))
    return h_new, h_new


def _gru_recurrence(xw, U, h0):
    """Fused forward over time for pre-projected inputs ``xw`` of shape (B, L, 3H).

    Mathematically identical to looping :func:`gru_step`; the backward pass is
    hand-written BPTT so a 960-step chunk costs two Python loops, not a graph
    with tens of thousands of nodes.
    """
    B, L, H3 = xw.shape
    H = H3 // 3
    Uzr = np.ascontiguousarray(U.data[:, : 2 * H])
    Uh = np.ascontiguousarray(U.data[:, 2 * H:])
    xt = np.ascontiguousarray(xw.data.transpose(1, 0, 2))
    hs, zr_all, c_all, rh_all = _kernels.gru_forward(xt, Uzr, Uh, np.ascontiguousarray(h0.data))
    out = hs[1:].transpose(1, 0, 2)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2))
        d_zr, d_c, dh0 = _kernels.gru_backward(
            gt, hs, zr_all, c_all, np.ascontiguousarray(Uzr.T), np.ascontiguousarray(Uh.T))
        dxw = np.concatenate((d_zr, d_c), axis=2).transpose(1, 0, 2)
        dU = np.concatenate((
            hs[:-1].reshape(L * B, H).T @ d_zr.reshape(L * B, 2 * H),
            rh_all.reshape(L * B, H).T @ d_c.reshape(L * B, H)), axis=1)
        return dxw, dU, dh0

    return G.custom_op(out, (xw, U, h0), backward, "gru_sequence")


def gru_sequence(layer, xs, h0=None):
    """Run a GRU over ``xs`` of shape (B, L, in); returns all states (B, L, H)."""
    xs = G._as_tensor(xs)
    if xs.ndim != 3 or xs.shape[-1] != layer.in_dim:
        raise G.ShapeError(f"gru_sequence: input {xs.shape} vs layer in_dim {layer.in_dim}")
    if h0 is None:
        h0 = layer.initial_state((xs.shape[0],))
    h0 = G._as_tensor(h0)
    xw = G.add(G.matmul(xs, layer.W), layer.b)
    return _gru_recurrence(xw, layer.U, h0)
