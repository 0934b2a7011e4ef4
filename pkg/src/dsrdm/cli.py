"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 runtime stage error (partial CSV kept with a TRUNCATED footer).
"""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ConfigError, RunConfig
from .denoiser import TrainingDiverged
from .pipeline import StageError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsrdm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("sweep-snr", "sweep-steps", "bench", "train", "verify"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value run-config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--mod", help="modulation order(s), e.g. 16 or 16,256")
        s.add_argument("--snr", help="lo:hi:step in dB, or a comma list; inf = noiseless")
        s.add_argument("--rician-k", dest="rician_k", help="Rician factor(s); inf = AWGN")
        s.add_argument("--mode", choices=("single", "multi"))
        s.add_argument("--predictor", help="oracle or a checkpoint path")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    for key in ("seed", "out", "mod", "snr", "rician_k", "mode", "predictor"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    return cfg.update(overrides).validate()


def run(args) -> int:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "sweep-snr":
        rows = harness.cmd_sweep_snr(cfg)
        print(f"wrote {len(rows)} rows to {cfg.out}")
    elif cmd == "sweep-steps":
        rows = harness.cmd_sweep_steps(cfg)
        print(f"wrote {len(rows)} rows to {cfg.out}")
    elif cmd == "bench":
        _, summary = harness.cmd_bench(cfg)
        for name, s in summary.items():
            print(f"{name:7s} elements={s['elements']:5d} median step {s['median_step_ms']:.3f} ms "
                  f"total {s['median_total_ms']:.3f} ms over {s['reps']} reps")
    elif cmd == "train":
        info = harness.cmd_train(cfg)
        print(json.dumps(info, indent=2))
    elif cmd == "verify":
        results = harness.cmd_verify(cfg)
        print(harness.verify_summary(results))
        with open(cfg.out, "w") as fh:
            fh.write(harness.dump_json(results))
        if any(r["status"] == "FAIL" for r in results):
            return EXIT_VERIFY
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, TrainingDiverged) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
