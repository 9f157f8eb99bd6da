"""Train the desk-size vocoder on the synthetic corpus and copy-synthesize.

Run:  python demos/desk_training.py [steps] [outdir]

The full 10,000-step run takes roughly an hour on one CPU core; a few hundred
steps already show the held-out NLL falling.
"""
import sys
import time
from pathlib import Path

import numpy as np

from ilpcnet import evaluation, io, trainer
from ilpcnet.model import ModelConfig, Vocoder
from ilpcnet.trainer import TrainConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
out = Path(sys.argv[2] if len(sys.argv) > 2 else "desk_run")
out.mkdir(parents=True, exist_ok=True)

t0 = time.perf_counter()
utts = io.synth_corpus(210, 1.0, seed=0)
train, heldout = utts[:200], utts[200:]
print(f"corpus: {len(train)} train / {len(heldout)} held-out utterances ({time.perf_counter() - t0:.0f} s)")

mcfg = ModelConfig.desk()
tcfg = TrainConfig(total_steps=steps, eval_every=max(1, steps // 5))
init = Vocoder(mcfg, seed=tcfg.seed)
init.fit_normalization([u.features for u in train])
print(f"held-out NLL at init {trainer.evaluate_nll(init, heldout, tcfg):.4f}")


def progress(step, br):
    if step % 100 == 0:
        print(f"  step {step:5d}  nll {br.nll:8.4f}  power {br.power:.5f}  total {br.total:8.4f}")


t0 = time.perf_counter()
res = trainer.train(train, tcfg, mcfg, heldout=heldout, log_path=out / "loss.csv",
                    ckpt_path=out / "model.ilps", progress=progress)
print(f"trained {steps} steps in {(time.perf_counter() - t0) / 60:.1f} min")
for step, v in res.evals:
    print(f"  held-out NLL @ {step}: {v:.4f}")

# copy-synthesis: features from the reference, waveform from the model
rows = []
for i, u in enumerate(heldout[:3]):
    syn = res.model.synthesize(u.features, seed=i)
    io.wav_write(out / f"{u.name}_ref.wav", u.audio)
    io.wav_write(out / f"{u.name}_syn.wav", syn)
    rows.append(evaluation.compare_audio(u.audio, syn))
for u, c in zip(heldout, rows):
    print(f"{u.name}: LSD {c.lsd_db:.2f} dB, F0 RMSE {c.f0_rmse_hz:.2f} Hz, voicing {c.voicing_agreement_pct:.1f}%")
print("mean LSD", np.mean([c.lsd_db for c in rows]).round(2), "dB; audio in", out)
