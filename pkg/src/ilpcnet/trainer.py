"""Training: chunk batching, noise injection, NLL + spectral power loss, Adam/Noam, checkpoints.

Every random draw is derived from ``(seed, purpose, step)``, so a run resumed
from a checkpoint at step ``k`` sees exactly the batches and noise an
uninterrupted run would have seen.
"""
from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import grad as G
from . import io
from .dsp import hann
from .model import ModelConfig, Vocoder

log = logging.getLogger(__name__)

# stream tags for np.random.default_rng([seed, tag, index])
_TAG_EPOCH = 1
_TAG_NOISE = 2

LOG_COLUMNS = ("step", "nll", "power", "total", "lr")


@dataclass
class TrainConfig:
    chunk_len: int = 960
    batch_size: int = 8
    lambda_pl: float = 10.0
    noise_sigma: float = 4.0 / 2 ** 16
    total_steps: int = 10000
    eval_every: int = 1000
    seed: int = 0
    base_lr: float = 1e-3
    warmup: int = 4000
    fft_size: int = 512
    fft_hop: int = 120
    frame_shift: int = 120

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            setattr(self, f.name, float(v) if f.type == "float" else int(v))
        if self.chunk_len < self.frame_shift or self.chunk_len % self.frame_shift:
            raise ValueError(f"chunk_len {self.chunk_len} must be a positive multiple of {self.frame_shift}")
        if self.lambda_pl < 0:
            raise ValueError("lambda_pl must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.lambda_pl > 0 and self.chunk_len < self.fft_size:
            raise ValueError(f"chunk_len {self.chunk_len} < fft_size {self.fft_size}")
        for name in ("batch_size", "warmup", "fft_size", "fft_hop", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @property
    def chunk_frames(self):
        return self.chunk_len // self.frame_shift

    def to_dict(self):
        return asdict(self)


@dataclass
class CorpusItem:
    name: str
    samples: np.ndarray
    track: object  # FeatureTrack


def as_corpus(pairs):
    """``[(name, AudioBuffer | array, FeatureTrack)]`` or ``Utterance`` list -> CorpusItems."""
    out = []
    for p in pairs:
        if isinstance(p, CorpusItem):
            out.append(p)
            continue
        if isinstance(p, io.Utterance):
            name, audio, track = p.name, p.audio, p.features
        else:
            name, audio, track = p
        x = np.asarray(getattr(audio, "samples", audio), dtype=np.float64)
        n = track.n_frames * track.frame_shift
        if x.size < n:
            raise ValueError(f"{name}: {x.size} samples < {track.n_frames} frames x {track.frame_shift}")
        out.append(CorpusItem(name, x[:n], track))
    return out


# --------------------------------------------------------------- batching

@dataclass
class Batch:
    """Aligned training chunks.

    ``features``/``start_frames`` select the conditioning frames the model turns
    into context rows (the rows depend on trainable weights, so they are
    computed inside the step).  ``history`` holds the ``M`` samples before each
    chunk, zeros at an utterance start.
    """

    features: list
    start_frames: np.ndarray
    samples: np.ndarray
    history: np.ndarray
    lp_rows: np.ndarray
    voicing: np.ndarray
    index: list = None

    @property
    def size(self):
        return self.samples.shape[0]


def chunk_starts(n_frames, chunk_frames, offset=0):
    """Frame-aligned chunk starts covering every frame of an utterance."""
    if n_frames < chunk_frames:
        return []
    last = n_frames - chunk_frames
    starts = list(range(offset, last + 1, chunk_frames))
    if offset > 0:
        starts.insert(0, 0)
    if not starts or starts[-1] != last:
        starts.append(last)
    return starts


def eligible_items(corpus, cfg):
    keep = []
    for i, item in enumerate(corpus):
        if item.track.n_frames < cfg.chunk_frames:
            log.warning("skipping %s: %d frames < chunk of %d", item.name,
                        item.track.n_frames, cfg.chunk_frames)
            continue
        keep.append(i)
    return keep


def epoch_chunks(corpus, cfg, epoch, items=None):
    """Shuffled ``(utterance, start_frame)`` list for one epoch."""
    rng = np.random.default_rng([cfg.seed, _TAG_EPOCH, epoch])
    items = eligible_items(corpus, cfg) if items is None else items
    chunks = []
    for i in items:
        off = int(rng.integers(0, cfg.chunk_frames))
        chunks.extend((i, s) for s in chunk_starts(corpus[i].track.n_frames, cfg.chunk_frames, off))
    order = rng.permutation(len(chunks))
    return [chunks[j] for j in order]


def assemble(corpus, chunks, cfg):
    M = corpus[chunks[0][0]].track.lp_order
    S, L = cfg.frame_shift, cfg.chunk_len
    feats, starts, samples, hist, rows, voicing = [], [], [], [], [], []
    for i, f0 in chunks:
        item = corpus[i]
        a = f0 * S
        ext = np.concatenate((np.zeros(M), item.samples))
        samples.append(item.samples[a:a + L])
        hist.append(ext[a:a + M])
        rows.append(np.repeat(item.track.lp_coeffs[f0:f0 + cfg.chunk_frames], S, axis=0))
        voicing.append(np.repeat(item.track.voicing[f0:f0 + cfg.chunk_frames], S))
        feats.append(item.track.features)
        starts.append(f0)
    return Batch(feats, np.array(starts), np.stack(samples), np.stack(hist),
                 np.stack(rows), np.stack(voicing), list(chunks))


class BatchStream:
    """Endless stream of batches; epochs are permutations of every chunk.

    ``batch(step)`` is random-access (steps count from 1), which is what makes
    resuming exact.  Batches may straddle an epoch boundary.
    """

    def __init__(self, corpus, cfg):
        self.corpus = as_corpus(corpus)
        if not self.corpus:
            raise ValueError("empty corpus")
        self.cfg = cfg
        self.items = eligible_items(self.corpus, cfg)
        if not self.items:
            raise ValueError(f"no utterance has at least {cfg.chunk_frames} frames")
        self._offsets = [0]  # cumulative chunk count at each epoch start

    @lru_cache(maxsize=4)
    def epoch(self, e):
        return epoch_chunks(self.corpus, self.cfg, e, self.items)

    def _locate(self, k):
        while self._offsets[-1] <= k:
            e = len(self._offsets) - 1
            self._offsets.append(self._offsets[-1] + len(self.epoch(e)))
        e = int(np.searchsorted(self._offsets, k, side="right")) - 1
        return e, k - self._offsets[e]

    def chunks(self, step):
        B = self.cfg.batch_size
        out = []
        for k in range((step - 1) * B, step * B):
            e, j = self._locate(k)
            out.append(self.epoch(e)[j])
        return out

    def batch(self, step):
        if step < 1:
            raise ValueError("steps count from 1")
        return assemble(self.corpus, self.chunks(step), self.cfg)

    def __iter__(self):
        step = 1
        while True:
            yield self.batch(step)
            step += 1


def make_batches(corpus, cfg, rng=None):
    """Stream of :class:`Batch` for ``corpus``.

    ``rng`` is accepted for interface symmetry but ignored: shuffling derives
    from ``cfg.seed`` so the stream is random-access.
    """
    return iter(BatchStream(corpus, cfg))


# ----------------------------------------------------------------- losses

def inject_noise(samples, sigma, rng):
    """Copy of ``samples`` with N(0, sigma^2) noise; ``samples`` is left untouched."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    samples = np.asarray(samples, dtype=np.float64)
    if sigma == 0:
        return samples.copy()
    return samples + sigma * rng.standard_normal(samples.shape)


# keeps the magnitude differentiable where a spectrum bin is exactly zero
MAG_EPS = 1e-12


@lru_cache(maxsize=8)
def _dft_basis(fft_size):
    n = np.arange(fft_size)[:, None]
    k = np.arange(fft_size // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / fft_size
    win = hann(fft_size)[:, None]
    return win * np.cos(ang), -win * np.sin(ang)


def _frame_index(length, fft_size, hop):
    n = 1 + (length - fft_size) // hop
    return np.arange(n)[:, None] * hop + np.arange(fft_size)[None, :]


def stft_magnitude(x, fft_size=512, hop=120):
    """Differentiable magnitude spectrogram of ``x`` (..., L) -> (..., frames, bins)."""
    x = G._as_tensor(x)
    L = x.shape[-1]
    if L < fft_size:
        raise G.ShapeError(f"stft: length {L} < fft size {fft_size}")
    idx = _frame_index(L, fft_size, hop)
    frames = G.take(x, idx.ravel(), axis=x.ndim - 1)
    frames = G.reshape(frames, (*x.shape[:-1], *idx.shape))
    cos_b, sin_b = _dft_basis(fft_size)
    re = G.matmul(frames, G.Tensor(cos_b))
    im = G.matmul(frames, G.Tensor(sin_b))
    return G.sqrt(G.add(G.add(G.square(re), G.square(im)), MAG_EPS))


def power_loss(x, x_hat, fft_size=512, hop=120):
    """Mean over (frame, bin) of ``(|STFT(x)| - |STFT(x_hat)|)^2``."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    x_hat = G._as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise G.ShapeError(f"power_loss: length mismatch {x.shape} vs {x_hat.shape}")
    with G.no_grad():
        ref = stft_magnitude(x, fft_size, hop).data
    return G.mean(G.square(G.sub(stft_magnitude(x_hat, fft_size, hop), ref)))


@dataclass
class LossBreakdown:
    nll: float
    power: float
    total: float
    lam: float = 0.0

    def check(self, tol=1e-12):
        return abs(self.total - (self.nll + self.lam * self.power)) <= tol


def total_loss(nll, power, lam):
    """Combined loss; works on floats or scalar tensors.

    Returns ``(total, breakdown)`` where ``total`` has the type of the inputs.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(nll, G.Tensor) or isinstance(power, G.Tensor):
        total = nll if power is None else G.add(nll, G.mul(power, lam))
        nv = nll.item() if isinstance(nll, G.Tensor) else float(nll)
        pv = 0.0 if power is None else (power.item() if isinstance(power, G.Tensor) else float(power))
        tv = total.item()
    else:
        nv, pv = float(nll), float(power)
        total = tv = nv + lam * pv
    for name, v in (("nll", nv), ("power", pv)):
        if not math.isfinite(v):
            raise G.NonFiniteError(f"total_loss: non-finite {name}")
    return total, LossBreakdown(nv, pv, tv, float(lam))


# ------------------------------------------------------------------ steps

def step_noise_rng(cfg, step):
    return np.random.default_rng([cfg.seed, _TAG_NOISE, step])


def batch_loss(model, batch, cfg, noise_rng=None):
    """Forward pass for one batch; returns ``(total tensor, breakdown)``."""
    clean = np.concatenate((batch.history, batch.samples), axis=-1)
    cond = clean if noise_rng is None else inject_noise(clean, cfg.noise_sigma, noise_rng)
    ctx = model.chunk_context(batch.features, batch.start_frames, cfg.chunk_frames)
    nll, mog = model.wavegen_forward(ctx, batch.samples, batch.lp_rows, conditioning=cond)
    if cfg.lambda_pl > 0:
        power = power_loss(batch.samples, mog.mean(), cfg.fft_size, cfg.fft_hop)
    else:
        power = None
    return total_loss(nll, power, cfg.lambda_pl)


def dump_batch(batch, step, directory=None):
    d = Path(directory or tempfile.gettempdir())
    path = d / f"nonfinite_batch_step{step}.npz"
    np.savez(path, samples=batch.samples, history=batch.history, lp_rows=batch.lp_rows,
             voicing=batch.voicing, start_frames=batch.start_frames,
             chunks=np.array(batch.index if batch.index else [], dtype=np.int64))
    return path


def train_step(model, batch, optimizer, step, cfg, dump_dir=None):
    """One update at ``step`` (>= 1) with Noam-scheduled Adam; returns the breakdown."""
    lr = G.noam_lr(step, cfg.base_lr, cfg.warmup)
    try:
        total, br = batch_loss(model, batch, cfg, step_noise_rng(cfg, step))
        if not math.isfinite(br.total):
            raise G.NonFiniteError("total loss is not finite")
        optimizer.zero_grad()
        G.backward(total)
        optimizer.step(lr)
    except G.NonFiniteError as exc:
        path = dump_batch(batch, step, dump_dir)
        raise G.NonFiniteError(f"step {step}: {exc}; batch dumped to {path}") from exc
    return br, lr


def evaluate_nll(model, corpus, cfg):
    """Teacher-forced NLL per sample over non-overlapping chunks, no noise."""
    corpus = as_corpus(corpus)
    chunks = [(i, s) for i in eligible_items(corpus, cfg)
              for s in range(0, corpus[i].track.n_frames - cfg.chunk_frames + 1, cfg.chunk_frames)]
    if not chunks:
        raise ValueError("evaluate_nll: no chunk fits in the corpus")
    total, count = 0.0, 0
    with G.no_grad():
        for j in range(0, len(chunks), cfg.batch_size):
            b = assemble(corpus, chunks[j:j + cfg.batch_size], cfg)
            ctx = model.chunk_context(b.features, b.start_frames, cfg.chunk_frames)
            nll, _ = model.wavegen_forward(ctx, b.samples, b.lp_rows, history=b.history)
            total += nll.item() * b.samples.size
            count += b.samples.size
    return total / count


# ------------------------------------------------------------ checkpoints

def checkpoint_of(model, optimizer, step, cfg):
    tensors = {}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    for name, b in model.buffers().items():
        tensors[name] = b
    st = optimizer.state
    for (name, _), m, v in zip(model.named_parameters(), st.m, st.v):
        tensors[f"adam.m/{name}"] = m
        tensors[f"adam.v/{name}"] = v
    config = {"model": model.cfg.to_dict(), "train": cfg.to_dict(),
              "adam": {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}}
    rng_state = {"scheme": "default_rng([seed, tag, index])", "seed": cfg.seed,
                 "next_step": int(step) + 1}
    return io.Checkpoint(config, int(step), rng_state, tensors)


def save_checkpoint(model, optimizer, step, cfg, path):
    io.write_checkpoint(path, checkpoint_of(model, optimizer, step, cfg))


def restore(ckpt):
    """``(model, optimizer, step, train_cfg)`` from a :class:`io.Checkpoint`."""
    try:
        mcfg = ModelConfig(**ckpt.config["model"])
        tcfg = TrainConfig(**ckpt.config["train"])
        adam = ckpt.config["adam"]
    except (KeyError, TypeError) as exc:
        raise io.FormatError(f"checkpoint config: {exc}") from exc
    model = Vocoder(mcfg, seed=tcfg.seed)
    t = ckpt.tensors

    def fetch(name, shape):
        if name not in t:
            raise io.FormatError(f"checkpoint tensor {name}: missing")
        if t[name].shape != tuple(shape):
            raise io.FormatError(f"checkpoint tensor {name}: shape {t[name].shape} != {tuple(shape)}")
        return t[name].copy()

    named = model.named_parameters()
    for name, p in named:
        p.data = fetch(name, p.shape)
    model.feat_mean = fetch("norm.mean", model.feat_mean.shape)
    model.feat_std = fetch("norm.std", model.feat_std.shape)
    opt = G.Adam(model.parameters(), adam["beta1"], adam["beta2"], adam["eps"])
    opt.state.m = [fetch(f"adam.m/{n}", p.shape) for n, p in named]
    opt.state.v = [fetch(f"adam.v/{n}", p.shape) for n, p in named]
    opt.state.step = int(adam["step"])
    model.loaded = True
    return model, opt, ckpt.step, tcfg


def load_checkpoint(path):
    return restore(io.read_checkpoint(path))


# ------------------------------------------------------------------- loop

@dataclass
class TrainResult:
    model: Vocoder
    optimizer: object
    step: int
    losses: list
    evals: list


def _fmt(v):
    return repr(float(v))


def train(corpus, cfg, model_cfg=None, heldout=None, log_path=None, ckpt_path=None,
          resume=None, progress=None, dump_dir=None):
    """Run (or continue) training up to ``cfg.total_steps``.

    ``resume`` is a checkpoint path; its config wins for the model, while
    ``cfg.total_steps`` may extend the run.  The CSV loss log gets one row per
    step and is appended to on resume.  ``heldout`` is evaluated every
    ``cfg.eval_every`` steps and at the end; results go to the log at INFO.
    """
    stream = BatchStream(corpus, cfg)
    if resume is not None:
        model, opt, start, saved = load_checkpoint(resume)
        saved_d, cfg_d = saved.to_dict(), cfg.to_dict()
        saved_d.pop("total_steps"), cfg_d.pop("total_steps")
        saved_d.pop("eval_every"), cfg_d.pop("eval_every")
        if saved_d != cfg_d:
            raise ValueError("resume: training config differs from the checkpoint's")
    else:
        model = Vocoder(model_cfg or ModelConfig.desk(), seed=cfg.seed)
        model.fit_normalization([c.track for c in stream.corpus])
        model.loaded = True
        opt = G.Adam(model.parameters())
        start = 0
    losses, evals = [], []
    fh = None
    if log_path is not None:
        mode = "a" if resume is not None and Path(log_path).exists() else "w"
        fh = open(log_path, mode, newline="")
        if mode == "w":
            fh.write(",".join(LOG_COLUMNS) + "\n")
    try:
        for step in range(start + 1, cfg.total_steps + 1):
            br, lr = train_step(model, stream.batch(step), opt, step, cfg, dump_dir)
            losses.append((step, br.nll, br.power, br.total, lr))
            if fh is not None:
                fh.write(",".join([str(step), _fmt(br.nll), _fmt(br.power), _fmt(br.total), _fmt(lr)]) + "\n")
            if heldout is not None and (step % cfg.eval_every == 0 or step == cfg.total_steps):
                v = evaluate_nll(model, heldout, cfg)
                evals.append((step, v))
                log.info("step %d: held-out nll %.4f", step, v)
            if progress is not None:
                progress(step, br)
    finally:
        if fh is not None:
            fh.close()
    step = max(start, cfg.total_steps)
    if ckpt_path is not None:
        save_checkpoint(model, opt, step, cfg, ckpt_path)
    return TrainResult(model, opt, step, losses, evals)


def read_loss_log(path):
    """Rows of the CSV loss log as a float array (step, nll, power, total, lr)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(",") != list(LOG_COLUMNS):
        raise io.FormatError(f"{path}: header: expected {','.join(LOG_COLUMNS)}")
    return np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln], dtype=np.float64
                    ).reshape(-1, len(LOG_COLUMNS))
