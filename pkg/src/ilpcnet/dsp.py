"""Framing, LP analysis, line spectral frequencies, pitch and STFT.

LP coefficients follow the plus-sum convention: the prediction of sample n is
``sum(alpha[i] * x[n - 1 - i])``, so the inverse filter is ``1 - sum alpha_i z^-i``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window, lfilter

DEFAULT_SAMPLE_RATE = 24000
ENERGY_FLOOR = 1e-10
LSF_GRID = 2048
LSF_TOL = 1e-12


class DegenerateFrameError(ValueError):
    pass


class UnstableFilterError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.samples).all():
            raise ValueError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    frame_shift: int = 120
    analysis_window: int = 480
    lp_order: int = 16
    sample_rate: int = DEFAULT_SAMPLE_RATE
    f0_min: float = 60.0
    f0_max: float = 400.0
    voicing_threshold: float = 0.3

    def __post_init__(self):
        if self.frame_shift < 1:
            raise ValueError("frame_shift must be >= 1")
        if self.analysis_window < self.frame_shift:
            raise ValueError("analysis_window must be >= frame_shift")
        if self.lp_order < 1:
            raise ValueError("lp_order must be >= 1")

    @property
    def feature_dim(self):
        return self.lp_order + 3


@dataclass
class LpFilter:
    """Per-frame predictor state; ``history[0]`` is the most recent sample."""

    coeffs: np.ndarray
    history: np.ndarray = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if self.history is None:
            self.history = np.zeros(self.coeffs.size)
        else:
            self.history = np.asarray(self.history, dtype=np.float64).reshape(-1)
        if self.history.size != self.coeffs.size:
            raise ValueError(
                f"history length {self.history.size} != order {self.coeffs.size}")

    @property
    def order(self):
        return self.coeffs.size


def hann(n):
    return get_window("hann", n, fftbins=True)


def _as_samples(audio):
    return audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)


def num_frames(n_samples, frame_shift):
    return n_samples // frame_shift


def frame_signal(audio, cfg=FrameConfig(), window=True):
    """Centered frames, one per hop, edges padded by replication.

    Frame ``t`` is centered on sample ``t * hop + hop // 2``.  Returns a
    ``(T, analysis_window)`` array, Hann-weighted unless ``window=False``.
    """
    x = _as_samples(audio)
    W, hop = cfg.analysis_window, cfg.frame_shift
    if x.size < W:
        raise ValueError(f"input too short: {x.size} samples < window {W}")
    T = num_frames(x.size, hop)
    left = W // 2 - hop // 2
    right = W
    padded = np.pad(x, (left, right), mode="edge")
    idx = np.arange(T)[:, None] * hop + np.arange(W)[None, :]
    frames = padded[idx]
    if window:
        frames = frames * hann(W)
    return frames


def autocorrelate(frame, max_lag):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise ValueError("autocorrelate: empty frame")
    if max_lag >= frame.size:
        raise ValueError(f"max_lag {max_lag} must be < frame length {frame.size}")
    n = frame.size
    return np.array([frame[: n - k] @ frame[k:] for k in range(max_lag + 1)])


def levinson_durbin(r, order, return_reflection=False):
    """Predictor coefficients from an autocorrelation sequence.

    Diagonal loading of ``1e-9 * r[0]`` keeps the recursion well-posed on
    nearly singular frames.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.size < order + 1:
        raise ValueError(f"need {order + 1} autocorrelation lags, got {r.size}")
    if not r[0] > 0:
        raise DegenerateFrameError("degenerate frame: r0 <= 0")
    r = r[: order + 1].copy()
    r[0] *= 1.0 + 1e-9
    a = np.zeros(order)
    k = np.zeros(order)
    err = r[0]
    for i in range(order):
        acc = r[i + 1] - a[:i] @ r[i:0:-1]
        ki = acc / err
        k[i] = ki
        a[:i] = a[:i] - ki * a[:i][::-1]
        a[i] = ki
        err *= 1.0 - ki * ki
    if return_reflection:
        return a, k
    return a


def _pq_real(poly_coeffs, omega, symmetric):
    """Real-valued amplitude of a (anti)symmetric polynomial on the unit circle."""
    n = poly_coeffs.size - 1
    k = np.arange(n + 1) - n / 2.0
    arg = np.multiply.outer(omega, k)
    basis = np.cos(arg) if symmetric else np.sin(arg)
    return basis @ poly_coeffs


@functools.lru_cache(maxsize=8)
def _grid_basis(n, symmetric):
    grid = np.pi * (np.arange(LSF_GRID) + 0.5) / LSF_GRID
    arg = np.multiply.outer(grid, np.arange(n + 1) - n / 2.0)
    return grid, np.cos(arg) if symmetric else np.sin(arg)


def _sum_difference_polys(coeffs):
    a = np.concatenate(([1.0], -np.asarray(coeffs, dtype=np.float64), [0.0]))
    rev = a[::-1]
    return a + rev, a - rev


def _bisect_roots(f, grid, vals):
    """Refine every sign change of ``f`` on ``grid`` to LSF_TOL, all at once."""
    j = np.nonzero(np.signbit(vals[:-1]) != np.signbit(vals[1:]))[0]
    lo, hi = grid[j].copy(), grid[j + 1].copy()
    flo = vals[j].copy()
    while lo.size and np.max(hi - lo) > LSF_TOL:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        same = np.signbit(fm) == np.signbit(flo)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    return list(0.5 * (lo + hi))


def is_stable(coeffs):
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size == 0:
        return True
    roots = np.roots(np.concatenate(([1.0], -coeffs)))
    return bool(np.all(np.abs(roots) < 1.0))


def lpc_to_lsf(coeffs):
    """LSF angles in (0, pi), ascending, from a stable predictor."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    M = coeffs.size
    if not is_stable(coeffs):
        raise UnstableFilterError("lpc_to_lsf: filter is not minimum phase")
    p, q = _sum_difference_polys(coeffs)
    grid, cos_basis = _grid_basis(M + 1, True)
    _, sin_basis = _grid_basis(M + 1, False)
    p_roots = _bisect_roots(lambda w: _pq_real(p, w, True), grid, cos_basis @ p)
    q_roots = _bisect_roots(lambda w: _pq_real(q, w, False), grid, sin_basis @ q)
    lsf = np.sort(np.array(p_roots + q_roots))
    if lsf.size != M:
        raise UnstableFilterError(f"lpc_to_lsf: found {lsf.size} of {M} frequencies")
    return lsf


def lsf_to_lpc(lsf):
    lsf = np.asarray(lsf, dtype=np.float64)
    M = lsf.size
    if M == 0:
        return np.zeros(0)
    if np.any(np.diff(lsf) <= 0) or lsf[0] <= 0 or lsf[-1] >= np.pi:
        raise ValueError("lsf_to_lpc: frequencies must be strictly increasing in (0, pi)")
    p = np.array([1.0])
    q = np.array([1.0])
    for w in lsf[0::2]:
        p = np.convolve(p, [1.0, -2.0 * np.cos(w), 1.0])
    for w in lsf[1::2]:
        q = np.convolve(q, [1.0, -2.0 * np.cos(w), 1.0])
    if M % 2 == 0:
        p = np.convolve(p, [1.0, 1.0])
        q = np.convolve(q, [1.0, -1.0])
    else:
        q = np.convolve(q, [1.0, 0.0, -1.0])
    a = 0.5 * (p + q)
    return -a[1 : M + 1]


def predict_sample(filt):
    return float(filt.coeffs @ filt.history)


def push_history(filt, x):
    if filt.history.size:
        filt.history[1:] = filt.history[:-1]
        filt.history[0] = x
    return filt


def _nccf(segment, W, lag_lo, lag_hi):
    ref = segment[:W]
    e0 = ref @ ref
    # energy of each lagged window via cumulative sums
    sq = np.concatenate(([0.0], np.cumsum(segment * segment)))
    lags = np.arange(lag_lo, lag_hi + 1)
    ek = sq[lags + W] - sq[lags]
    corr = np.lib.stride_tricks.sliding_window_view(segment, W)[lags] @ ref
    denom = np.sqrt(e0 * ek)
    out = np.zeros(lags.size)
    ok = denom > 1e-20
    out[ok] = corr[ok] / denom[ok]
    return lags, out


def estimate_f0(audio, cfg=FrameConfig()):
    """Per-frame (f0 in Hz, voicing flag) from the normalized cross-correlation.

    The shortest lag whose correlation peak is within 90% of the best one
    wins, to avoid period doubling.  Unvoiced frames report f0 = 0.
    """
    x = _as_samples(audio)
    sr = cfg.sample_rate
    W, hop = cfg.analysis_window, cfg.frame_shift
    if x.size < W:
        raise ValueError(f"input too short: {x.size} samples < window {W}")
    lag_lo = int(np.floor(sr / cfg.f0_max))
    lag_hi = int(np.ceil(sr / cfg.f0_min))
    T = num_frames(x.size, hop)
    left = W // 2 - hop // 2
    padded = np.pad(x, (left + lag_hi // 2, W + lag_hi), mode="constant")
    f0 = np.zeros(T)
    voiced = np.zeros(T, dtype=np.int64)
    for t in range(T):
        start = t * hop
        seg = padded[start : start + W + lag_hi + 1]
        seg = seg - seg[:W].mean()
        if seg[:W] @ seg[:W] < 1e-12 * W:
            continue
        lags, c = _nccf(seg, W, lag_lo, lag_hi)
        peaks = np.nonzero((c[1:-1] > c[:-2]) & (c[1:-1] >= c[2:]))[0] + 1
        if peaks.size == 0:
            continue
        best = c[peaks].max()
        if best <= cfg.voicing_threshold:
            continue
        j = peaks[np.nonzero(c[peaks] >= 0.9 * best)[0][0]]
        # parabolic refinement of the integer peak
        y0, y1, y2 = c[j - 1], c[j], c[j + 1]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den < 0 else 0.0
        f0[t] = sr / (lags[j] + shift)
        voiced[t] = 1
    return f0, voiced


@dataclass
class FeatureTrack:
    """Frame-rate conditioning: ``[log_f0, voicing, log_energy, lsf_1..lsf_M]``."""

    features: np.ndarray
    lp_coeffs: np.ndarray = None
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frame_shift: int = 120

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] < 4:
            raise ValueError(f"feature rows must be 2-D with >= 4 columns, got {self.features.shape}")
        if self.lp_coeffs is None:
            self.lp_coeffs = np.array([lsf_to_lpc(row) for row in self.lsf]).reshape(
                self.n_frames, self.lp_order)
        self.lp_coeffs = np.asarray(self.lp_coeffs, dtype=np.float64)

    @property
    def n_frames(self):
        return self.features.shape[0]

    @property
    def lp_order(self):
        return self.features.shape[1] - 3

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def log_f0(self):
        return self.features[:, 0]

    @property
    def voicing(self):
        return self.features[:, 1]

    @property
    def log_energy(self):
        return self.features[:, 2]

    @property
    def lsf(self):
        return self.features[:, 3:]

    def sample_lp_rows(self):
        """Per-sample coefficient rows: each frame's predictor held for one hop."""
        return np.repeat(self.lp_coeffs, self.frame_shift, axis=0)

    def sample_voicing(self):
        return np.repeat(self.voicing, self.frame_shift)


def flat_lsf(order):
    """LSFs of the zero predictor: equally spaced on (0, pi)."""
    return np.pi * np.arange(1, order + 1) / (order + 1)


def extract_features(audio, cfg=FrameConfig()):
    x = _as_samples(audio)
    M = cfg.lp_order
    frames = frame_signal(x, cfg)
    f0, voiced = estimate_f0(x, cfg)
    T = frames.shape[0]
    feats = np.zeros((T, M + 3))
    alphas = np.zeros((T, M))
    for t in range(T):
        r = autocorrelate(frames[t], M)
        feats[t, 2] = np.log(r[0] + ENERGY_FLOOR)
        if r[0] > 0:
            a = levinson_durbin(r, M)
            lsf = lpc_to_lsf(a)
        else:
            lsf = flat_lsf(M)
        feats[t, 3:] = lsf
        alphas[t] = lsf_to_lpc(lsf)
    feats[:, 0] = np.where(voiced == 1, np.log(np.where(f0 > 0, f0, 1.0)), 0.0)
    feats[:, 1] = voiced
    return FeatureTrack(feats, alphas, sample_rate=cfg.sample_rate, frame_shift=cfg.frame_shift)


def lp_residual(x, coeffs):
    """Excitation ``x - p`` for a fixed predictor (zero initial history)."""
    return lfilter(np.concatenate(([1.0], -np.asarray(coeffs))), [1.0], x)


def lp_synthesize(excitation, coeffs):
    return lfilter([1.0], np.concatenate(([1.0], -np.asarray(coeffs))), excitation)


def stft(audio, fft_size=512, hop=120, window=None):
    """Magnitude spectrogram, ``(frames, fft_size // 2 + 1)``, no padding."""
    x = _as_samples(audio)
    if x.size < fft_size:
        raise ValueError(f"input too short: {x.size} samples < fft size {fft_size}")
    win = hann(fft_size) if window is None else np.asarray(window)
    n = 1 + (x.size - fft_size) // hop
    idx = np.arange(n)[:, None] * hop + np.arange(fft_size)[None, :]
    return np.abs(np.fft.rfft(x[idx] * win, axis=-1))
