"""Is the maths right?  Finite differences and plain-loop oracles, in a minute.

    python3 demos/check_the_math.py
"""
import math

import numpy as np

from latticerf import autodiff as ad
from latticerf.gradcheck import format_report, run_gradcheck
from latticerf.renderer import composite, composite_weights, idw_aggregate_one

# Every loss against central differences on a 2-view, 16x16 toy scene.
print(format_report(run_gradcheck(n_probes=200)))

# Inverse-distance pooling, by hand: two equally distant neighbours average their colours.
sigma, colour = idw_aggregate_one([(1.0, (1, 0, 0), 0.1), (1.0, (0, 0, 1), 0.1)], 1e-8)
print("\nIDW of red and blue at equal distance:", colour.round(6), "density", round(sigma, 6))

# Volume compositing: weights plus leftover transmittance always sum to one.
rng = np.random.default_rng(0)
sig = rng.exponential(2.0, 16)
w, T = composite_weights(sig, np.full(16, 0.1))
print(f"compositing partition of unity: {w.sum() + T:.15f}")

# ... and the pixel equals the textbook quadrature written as a loop.
col = rng.random((16, 3))
with ad.no_grad():
    rgb, _ = composite(sig[None], col[None], np.full((1, 16), 0.1))
Tacc, ref = 1.0, np.zeros(3)
for s, c in zip(sig, col):
    ref += Tacc * (1 - math.exp(-0.1 * s)) * c
    Tacc *= math.exp(-0.1 * s)
print("max |vectorised - loop| pixel error:", float(np.abs(rgb.data[0] - ref).max()))
