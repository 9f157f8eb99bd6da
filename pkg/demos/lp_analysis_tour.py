"""Walk through the frame-level analysis on one synthetic utterance.

Run:  python demos/lp_analysis_tour.py
"""
import numpy as np

from ilpcnet import dsp, io

rng = np.random.default_rng(3)
utt = io.synth_utterance(rng, 24000, name="tour")
x = utt.audio.samples
print(f"{utt.name}: {x.size} samples at {utt.audio.sample_rate} Hz, peak {np.abs(x).max():.3f}")

# one 480-sample window, Hann weighted, order-16 autocorrelation method
cfg = dsp.FrameConfig()
frames = dsp.frame_signal(x, cfg)
k = 40
r = dsp.autocorrelate(frames[k], cfg.lp_order)
alpha = dsp.levinson_durbin(r, cfg.lp_order)
print("frame", k, "predictor (first 4):", np.round(alpha[:4], 4))
print("stable:", dsp.is_stable(alpha))

# the predictor explains most of the frame's energy
res = dsp.lp_residual(frames[k], alpha)
gain = 10 * np.log10(np.sum(frames[k] ** 2) / np.sum(res ** 2))
print(f"prediction gain {gain:.1f} dB")

# LSFs interleave on (0, pi) and convert back without loss
lsf = dsp.lpc_to_lsf(alpha)
print("LSF (rad, first 4):", np.round(lsf[:4], 4))
print("roundtrip error:", np.abs(dsp.lsf_to_lpc(lsf) - alpha).max())

# pitch track against the generator's own contour
track = dsp.extract_features(utt.audio)
both = (track.voicing == 1) & (utt.voiced == 1)
err = np.exp(track.log_f0[both]) - utt.f0[both]
print(f"F0 RMSE vs generator {np.sqrt(np.mean(err ** 2)):.2f} Hz over {both.sum()} frames")
print(f"voicing agreement {100 * np.mean(track.voicing == utt.voiced):.1f}%")
print("feature matrix", track.features.shape, "= [log F0, voicing, log energy, 16 LSFs]")
