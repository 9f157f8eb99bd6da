"""The LP-MDN output head in isolation: shifting, scoring, sampling, sharpening.

Run:  python demos/lpmdn_head.py
"""
import numpy as np

from ilpcnet import grad as G
from ilpcnet import lpmdn
from ilpcnet.lpmdn import NetHeads

rng = np.random.default_rng(0)
n, N = 5, 3

# raw heads describe the excitation; the prediction p moves every mean
heads = NetHeads(G.Tensor(rng.standard_normal((n, N))), G.Tensor(0.1 * rng.standard_normal((n, N))),
                 G.Tensor(rng.uniform(-4, -2, (n, N))))
p = rng.uniform(-0.3, 0.3, n)
x = p + 0.02 * rng.standard_normal(n)
speech = lpmdn.heads_to_mog(heads, p)
excite = lpmdn.heads_to_mog(heads, np.zeros(n))
with G.no_grad():
    a = lpmdn.mog_nll(speech, x).item()
    b = lpmdn.mog_nll(excite, x - p).item()
print(f"NLL of x under shifted mixture   {a:.12f}")
print(f"NLL of x - p under plain mixture {b:.12f}")

# single Gaussian at the origin: the textbook values
unit = lpmdn.heads_to_mog(NetHeads(None, G.Tensor(np.zeros((2, 1))), G.Tensor(np.zeros((2, 1)))), 0.0)
print("NLL at 0 and 1:", -lpmdn.mog_log_prob(unit, np.array([0.0, 1.0])).data)

# sharpening scales the spread in voiced samples only
m = 100_000
d = lpmdn.heads_to_mog(NetHeads(None, G.Tensor(np.zeros((m, 1))), G.Tensor(np.full((m, 1), -2.0))), 0.0)
voiced = np.arange(m) % 2
plain = lpmdn.mog_sample(lpmdn.sharpen(d, voiced, 1.0), np.random.default_rng(1))
sharp = lpmdn.mog_sample(lpmdn.sharpen(d, voiced, 0.7), np.random.default_rng(1))
v = voiced == 1
print(f"voiced variance ratio {sharp[v].var() / plain[v].var():.4f} (0.7^2 = 0.49)")
print(f"unvoiced variance ratio {sharp[~v].var() / plain[~v].var():.4f}")
