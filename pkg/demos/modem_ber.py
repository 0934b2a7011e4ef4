"""Gray-mapped QAM over plain AWGN: simulated BER next to the closed form.

Run:  python demos/modem_ber.py
"""
import numpy as np

from dsrdm.modem import analytic_qam_ber, demodulate, modulate

rng = np.random.default_rng(0)
n_bits = 400_000

print(f"{'M':>4} {'Es/N0 dB':>9} {'simulated':>10} {'analytic':>10}")
for M in (4, 16, 64, 256):
    bits = rng.integers(0, 2, n_bits - n_bits % int(np.log2(M)), dtype=np.uint8)
    tx = modulate(bits, M)
    for snr_db in (0, 10, 20):
        snr = 10 ** (snr_db / 10)
        # unit-energy symbols, complex noise of total variance 1/snr
        noise = np.sqrt(0.5 / snr) * (rng.standard_normal(tx.size) + 1j * rng.standard_normal(tx.size))
        ber = np.mean(demodulate(tx + noise, M) != bits)
        print(f"{M:>4} {snr_db:>9} {ber:>10.2e} {analytic_qam_ber(M, snr):>10.2e}")
