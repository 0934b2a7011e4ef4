"""Rician block fading and zero-forcing: how the gain spread turns into
per-lane noise after equalization.

Run:  python demos/channel_fading.py
"""
import math

import numpy as np

from dsrdm.channel import draw_channel, effective_noise, snr_to_sigma

sigma2 = snr_to_sigma(10.0)
print(f"10 dB per-lane noise variance: {sigma2:.4f}")
for k in (0.0, 3.0, 10.0, math.inf):
    ch = draw_channel(100_000, k, sigma2, seed=1)
    v = effective_noise(ch)
    print(f"k={k:>4}: E|h|^2={np.mean(abs(ch.h) ** 2):.3f}  "
          f"median equalized noise={np.median(v):.4f}  99th pct={np.percentile(v, 99):.3f}")
