"""End-to-end BER against SNR with the oracle predictor, AWGN and Rician.

Equivalent CLI:
    dsrdm sweep-snr --mod 16,256 --rician-k inf,3 --snr 0:20:5 --out sweep.csv

Run:  python demos/snr_sweep.py
"""
import math

import numpy as np

from dsrdm.carrier import synth_carrier
from dsrdm.modem import analytic_qam_ber
from dsrdm.pipeline import LinkConfig, end_to_end
from dsrdm.schedule import linear_schedule

car = synth_carrier(32, "gaussian-blob", 0)
sched = linear_schedule(1000)
bits = np.random.default_rng(0).integers(0, 2, 200_000, dtype=np.uint8)

for M in (16, 256):
    for k in (math.inf, 3.0):
        line = []
        for snr in (0, 5, 10, 15, 20):
            r = end_to_end(bits, LinkConfig(car, sched, M=M, snr_db=snr, rician_k=k, seed=snr))
            extra = f"/{analytic_qam_ber(M, r.eff_snr):.1e}" if math.isinf(k) else ""
            line.append(f"{snr}dB {r.ber:.1e}{extra}")
        print(f"{M:>3}-QAM k={k}: " + "  ".join(line))
print("(AWGN entries show simulated/analytic at the measured effective SNR)")
