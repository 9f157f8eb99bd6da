"""File formats (WAV, feature files, checkpoints) and the synthetic corpus.

All formats are little-endian and contain nothing but their content, so equal
inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from . import dsp
from .dsp import AudioBuffer, FeatureTrack, FrameConfig


class FormatError(ValueError):
    """A file does not match its declared layout; the message names the field."""


# ----------------------------------------------------------------------- WAV

def wav_write(path, audio):
    x = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    data = x.tobytes()
    sr = int(audio.sample_rate)
    fmt = struct.pack("<HHIIHH", 1, 1, sr, sr * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def wav_read(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: RIFF/WAVE header: not a WAVE file")
    riff_size = struct.unpack_from("<I", raw, 4)[0]
    if riff_size + 8 > len(raw):
        raise FormatError(f"{path}: RIFF size: declares {riff_size + 8} bytes, file has {len(raw)}")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk '{cid.decode(errors='replace')}' size: "
                              f"declares {size} bytes, only {len(body)} present")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk size: {size} < 16")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: fmt chunk: missing")
    if data is None:
        raise FormatError(f"{path}: data chunk: missing")
    codec, channels, sr, _, block_align, bits = fmt
    if codec != 1:
        raise FormatError(f"{path}: audio format: unsupported codec {codec} (need PCM=1)")
    if channels != 1:
        raise FormatError(f"{path}: channels: expected 1, got {channels}")
    if bits != 16:
        raise FormatError(f"{path}: bits per sample: expected 16, got {bits}")
    if block_align != 2:
        raise FormatError(f"{path}: block align: expected 2, got {block_align}")
    if len(data) % 2:
        raise FormatError(f"{path}: data chunk size: odd byte count {len(data)}")
    x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    return AudioBuffer(x, sr)


# ------------------------------------------------------------- feature files

FEAT_MAGIC = b"ILPC"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIIIII")


def feature_write(path, track):
    T, F = track.features.shape
    header = _FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, int(track.sample_rate),
                               int(track.frame_shift), track.lp_order, F, T)
    Path(path).write_bytes(header + track.features.astype("<f4").tobytes())


def feature_read(path):
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: header: {len(raw)} bytes < {_FEAT_HEADER.size}")
    magic, version, sr, shift, order, dim, count = _FEAT_HEADER.unpack_from(raw)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: magic: expected {FEAT_MAGIC!r}, got {magic!r}")
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: version: expected {FEAT_VERSION}, got {version}")
    if dim != order + 3:
        raise FormatError(f"{path}: feature_dim: {dim} != lp_order + 3 = {order + 3}")
    payload = raw[_FEAT_HEADER.size:]
    if len(payload) != 4 * count * dim:
        raise FormatError(f"{path}: frame_count: declares {count} x {dim} floats, "
                          f"payload holds {len(payload) // 4}")
    feats = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(count, dim)
    return FeatureTrack(feats, sample_rate=sr, frame_shift=shift)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ILPS"
CKPT_VERSION = 1
CKPT_END = b"END!"


@dataclass
class Checkpoint:
    config: dict
    step: int
    rng_state: dict
    tensors: dict


def _pack_blob(b):
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(ckpt):
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    out.append(_pack_blob(json.dumps(ckpt.config, sort_keys=True).encode()))
    out.append(struct.pack("<Q", int(ckpt.step)))
    out.append(_pack_blob(json.dumps(ckpt.rng_state, sort_keys=True).encode()))
    out.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    out.append(CKPT_END)
    return b"".join(out)


def write_checkpoint(path, ckpt):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n, field):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: {field}: file truncated at byte {len(self.raw)}")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt, field):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def read_checkpoint(path):
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: magic: expected {CKPT_MAGIC!r}, got {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: version: expected {CKPT_VERSION}, got {version}")
    (n,) = r.unpack("<I", "config length")
    config = json.loads(r.take(n, "config"))
    (step,) = r.unpack("<Q", "step")
    (n,) = r.unpack("<I", "rng state length")
    rng_state = json.loads(r.take(n, "rng state"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (nl,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(nl, f"tensor {i} name").decode()
        (ndim,) = r.unpack("<I", f"{name} ndim")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape)) if ndim else 1
        data = r.take(8 * size, f"{name} payload")
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if r.take(4, "end marker") != CKPT_END:
        raise FormatError(f"{path}: end marker: missing")
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: length: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(config, step, rng_state, tensors)


# ----------------------------------------------------------- synthetic corpus

@dataclass
class Utterance:
    name: str
    audio: AudioBuffer
    features: FeatureTrack
    f0: np.ndarray
    voiced: np.ndarray


# formant frequency ranges (Hz) and bandwidth ranges; the last three pairs
# are broad and only shape the top of the band
_FORMANTS = [(300, 900, 60, 160), (900, 2400, 80, 200), (2200, 3400, 120, 300),
             (3400, 4600, 200, 400), (4600, 6000, 300, 600), (6500, 8500, 800, 1600),
             (9000, 10500, 1200, 2400), (10800, 11800, 2000, 3000)]


def _random_envelope_lsf(rng, order, sr):
    """LSFs of a speech-like all-pole envelope built from random pole pairs."""
    poly = np.array([1.0])
    for lo, hi, blo, bhi in _FORMANTS[: order // 2]:
        f = rng.uniform(lo, hi)
        bw = rng.uniform(blo, bhi)
        r = np.exp(-np.pi * bw / sr)
        poly = np.convolve(poly, [1.0, -2.0 * r * np.cos(2 * np.pi * f / sr), r * r])
    if order % 2:
        poly = np.convolve(poly, [1.0, -0.5])
    return dsp.lpc_to_lsf(-poly[1:])


def _smooth_contour(rng, n, sr, lo, hi, knot_s=0.25):
    knots = max(2, int(np.ceil(n / (knot_s * sr))) + 1)
    base = rng.uniform(lo + 20, hi - 40)
    vals = np.clip(base * rng.uniform(0.85, 1.15, knots), lo, hi)
    t = np.linspace(0, n - 1, knots)
    return np.interp(np.arange(n), t, vals)


def glottal_wave(f0, sr, cutoff=0.45, tilt=1.0):
    """Additive harmonic source with amplitudes ``k ** -tilt``, tapered to zero at ``cutoff * sr``.

    The default ``tilt=1`` is a band-limited sawtooth (6 dB/octave).
    """
    phase = 2.0 * np.pi * np.cumsum(f0 / sr)
    out = np.zeros(f0.size)
    k_max = int(cutoff * sr / f0.min())
    for k in range(1, k_max + 1):
        fk = k * f0
        taper = np.clip((cutoff * sr - fk) / (0.1 * sr), 0.0, 1.0)
        if not taper.any():
            break
        out -= taper * np.sin(k * phase) / k ** tilt
    return out / np.sqrt(0.5 * np.sum(np.arange(1.0, k_max + 1) ** (-2 * tilt)))


def _excitation(rng, f0, voiced, sr, hop, breath=0.02, unvoiced=0.5):
    gate = np.convolve(voiced.astype(np.float64), np.ones(hop // 2) / (hop // 2), mode="same")
    noise = rng.standard_normal(f0.size)
    # fricative-like: unvoiced noise is high-passed so low formants do not ring
    hiss = sosfilt(butter(2, 2000.0, "highpass", fs=sr, output="sos"), noise)
    return gate * (glottal_wave(f0, sr) + breath * noise) + (1.0 - gate) * unvoiced * hiss


def synth_utterance(rng, n_samples, cfg=FrameConfig(), name="utt", unvoiced_gamma=0.6):
    """One harmonic utterance with its programmed per-frame F0 and voicing."""
    sr, hop, M = cfg.sample_rate, cfg.frame_shift, cfg.lp_order
    T = n_samples // hop
    n = T * hop
    voiced_frames = np.ones(T, dtype=np.int64)
    for _ in range(rng.integers(1, 3)):
        length = int(rng.integers(12, 30))
        start = int(rng.integers(0, max(1, T - length)))
        voiced_frames[start:start + length] = 0
    f0 = _smooth_contour(rng, n, sr, 100.0, 300.0)
    excitation = _excitation(rng, f0, np.repeat(voiced_frames, hop), sr, hop)
    # all-pole envelope moving linearly in the LSF domain between two anchors
    lsf_a, lsf_b = _random_envelope_lsf(rng, M, sr), _random_envelope_lsf(rng, M, sr)
    out = np.empty(n)
    zi = np.zeros(M)
    for t in range(T):
        w = t / max(T - 1, 1)
        a = dsp.lsf_to_lpc((1 - w) * lsf_a + w * lsf_b)
        if not voiced_frames[t]:
            # fricatives have no sharp formants
            a = a * unvoiced_gamma ** np.arange(1, M + 1)
        seg, zi = lfilter([1.0], np.concatenate(([1.0], -a)), excitation[t * hop:(t + 1) * hop], zi=zi)
        out[t * hop:(t + 1) * hop] = seg
    out *= 0.5 / np.max(np.abs(out))
    audio = AudioBuffer(out, sr)
    frame_f0 = f0[np.arange(T) * hop + hop // 2] * voiced_frames
    return Utterance(name, audio, dsp.extract_features(audio, cfg), frame_f0, voiced_frames)


def synth_corpus(n_utterances, duration_s=1.0, seed=0, cfg=FrameConfig()):
    if n_utterances < 1:
        raise ValueError("synth_corpus: need at least one utterance")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * cfg.sample_rate))
    return [synth_utterance(rng, n, cfg, name=f"utt{i:04d}") for i in range(n_utterances)]


def write_corpus(directory, utterances):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for u in utterances:
        wav_write(d / f"{u.name}.wav", u.audio)
        feature_write(d / f"{u.name}.feat", u.features)


def read_corpus(directory):
    """Paired ``(name, AudioBuffer, FeatureTrack)`` for every ``*.wav`` with a ``.feat``."""
    d = Path(directory)
    pairs = []
    for wav in sorted(d.glob("*.wav")):
        feat = wav.with_suffix(".feat")
        if feat.exists():
            pairs.append((wav.stem, wav_read(wav), feature_read(feat)))
    return pairs
