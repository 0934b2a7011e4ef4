"""Per-step wall clock for an image carrier against its 8x smaller latent.

Equivalent CLI:  dsrdm bench --out bench.csv --set bench_reps=20

Run:  python demos/latent_bench.py
"""
import tempfile
from pathlib import Path

from dsrdm import harness
from dsrdm.config import RunConfig

out = Path(tempfile.mkdtemp()) / "bench.csv"
_, summary = harness.cmd_bench(RunConfig().update({"bench_reps": "10", "snr": "10", "out": str(out)}))
for name, s in summary.items():
    print(f"{name:>7}: {s['elements']:>5} elements, median step {s['median_step_ms']:.3f} ms, "
          f"median frame {s['median_total_ms']:.2f} ms")
