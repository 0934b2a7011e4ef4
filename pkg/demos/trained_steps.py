"""Train the small MLP predictor and look at BER and extraction MSE per
reverse step of a 16-step window.

Takes about a minute. Equivalent CLI:
    dsrdm train --out mlp.ckpt --set carrier_size=8 --set T=32 \
        --set beta_start=0.1 --set beta_end=0.1 --set train_steps=10000
    dsrdm sweep-steps --mode multi --predictor mlp.ckpt --snr 10,inf --out steps.csv \
        --set carrier_size=8 --set T=32 --set beta_start=0.1 --set beta_end=0.1 --set window=17:32

At 10 dB the first reverse step (t=32) is worst: the matched first block
absorbs its own channel noise, while each later block is recovered by
differencing two noisy snapshots. Without channel noise the learned
predictor alone is actually better at large t.

Run:  python demos/trained_steps.py
"""
import math
import tempfile
from pathlib import Path

from dsrdm import harness
from dsrdm.config import RunConfig

tmp = Path(tempfile.mkdtemp())
cfg = RunConfig().update({"carrier_size": "8", "T": "32", "beta_start": "0.1", "beta_end": "0.1",
                          "window": "17:32", "train_steps": "10000", "out": str(tmp / "mlp.ckpt")})
info = harness.cmd_train(cfg)
print(f"trained {info['params']} parameters in {info['seconds']:.0f}s, "
      f"held-out eps MSE {info['heldout_mse']:.4f}")

cfg = cfg.update({"predictor": str(tmp / "mlp.ckpt"), "mode": "multi", "snr": "10,inf",
                  "bits": "30720", "trials": "4", "out": str(tmp / "steps.csv")})
for r in harness.cmd_sweep_steps(cfg):
    label = "clean" if math.isinf(r.snr_db) else f"{r.snr_db:g}dB"
    print(f"{label:>6} step {r.step:>2}: BER {r.ber:.4f}  MSE {r.mse:.4f}")
