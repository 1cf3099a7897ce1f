"""How the beam-score spread sharpens the within-bucket item distribution.

Cosines are fixed; only the spread of the prefix log-probabilities changes.
"""
import numpy as np

from sigmarec.generator import apf_id_distribution, beam_sigma

rng = np.random.default_rng(0)
cos = np.sort(rng.uniform(-0.2, 0.9, 12))[::-1]
base = rng.normal(size=8)

print(f"{'sigma':>8} {'entropy':>8} {'top-1':>6} {'top-3':>6}")
for scale in (0.0, 0.05, 0.2, 0.5, 1.0, 2.0):
    phis = base * scale - 3.0
    p = apf_id_distribution(cos, phis)
    q = p[p > 0]
    print(f"{beam_sigma(phis):8.4f} {-(q * np.log(q)).sum():8.3f} {p[0]:6.3f} {p[:3].sum():6.3f}")
print(f"\nuniform entropy would be {np.log(len(cos)):.3f}")
