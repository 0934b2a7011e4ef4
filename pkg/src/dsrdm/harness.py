"""Experiment sweeps, timing and verification built on :mod:`dsrdm.pipeline`.

Every command writes CSV rows with the fixed header :data:`HEADER`. Rows are
emitted in grid order by a single writer, so results do not depend on the
number of worker threads (``DSRDM_THREADS``).
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import channel as chan
from .carrier import synth_carrier, encode_latent
from .config import ConfigError, RunConfig, trial_seed
from .denoiser import (
    MLPPredictor,
    ScheduleMismatch,
    TrainConfig,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    train_mlp,
)
from .modem import analytic_qam_ber
from .pipeline import LinkConfig, RecoveryReport, StageError, end_to_end
from .schedule import default_step, match_to_channel, verify_matching

HEADER = ["fingerprint", "snr_db", "step", "ber", "ber_lo", "ber_hi", "mse", "eff_snr", "ms", "seed"]
TRUNCATED = "TRUNCATED"
WILSON_Z = 1.959963984540054


def wilson(errors: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = errors / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if errors == 0 else max(0.0, centre - half)
    hi = 1.0 if errors == n else min(1.0, centre + half)
    return lo, hi


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


@dataclass
class ResultRow:
    fingerprint: str
    snr_db: float
    step: int
    ber: float
    ber_lo: float
    ber_hi: float
    mse: float
    eff_snr: float
    ms: float | None
    seed: int

    def cells(self) -> list[str]:
        return [self.fingerprint] + [_num(getattr(self, k)) for k in HEADER[1:]]

    @classmethod
    def parse(cls, cells: list[str]) -> "ResultRow":
        def f(s):
            return math.nan if s == "" else float(s)
        fp, snr, step, ber, lo, hi, mse, eff, ms, seed = cells
        return cls(fp, f(snr), int(step), f(ber), f(lo), f(hi), f(mse), f(eff),
                   None if ms == "" else float(ms), int(seed))


def read_csv(path) -> tuple[list[ResultRow], bool]:
    """Parse a results file; the flag says whether it ends in a TRUNCATED row."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    truncated = bool(rows[1:]) and rows[-1][0] == TRUNCATED
    body = rows[1:-1] if truncated else rows[1:]
    return [ResultRow.parse(r) for r in body], truncated


class CsvSink:
    """Single writer; rows are flushed as they arrive so partial runs survive."""

    def __init__(self, path):
        self.path = path
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(HEADER)
        self.rows: list[ResultRow] = []

    def add(self, row: ResultRow):
        self.rows.append(row)
        self.w.writerow(row.cells())
        self.fh.flush()

    def truncate(self, reason: str):
        self.w.writerow([TRUNCATED] + [""] * (len(HEADER) - 2) + [reason.replace("\n", " ")[:200]])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DSRDM_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def resolve_predictor(cfg: RunConfig, carrier, sched):
    if cfg.predictor == "oracle":
        return "oracle"
    try:
        return load_checkpoint(cfg.predictor, sched, carrier.shape, allow_mismatch=cfg.allow_mismatch)
    except ScheduleMismatch as exc:
        raise ConfigError(str(exc)) from exc
    except (CheckpointError, OSError) as exc:
        raise ConfigError(f"cannot load predictor {cfg.predictor}: {exc}") from exc


def link_config(cfg: RunConfig, carrier, sched, predictor, M, k, snr, seed) -> LinkConfig:
    return LinkConfig(
        carrier=carrier, sched=sched, M=M, mode=cfg.mode,
        snr_db=None if math.isinf(snr) else snr, rician_k=k, predictor=predictor,
        step=cfg.step or None, window=cfg.window_range, extraction=cfg.extraction,
        matching=cfg.matching, signal_power=cfg.signal_power, seed=seed,
    )


def run_point(cfg: RunConfig, carrier, sched, predictor, M: int, k: float, snr: float, point: str):
    """All trials of one grid point, merged in trial order."""
    def one(trial):
        seed = trial_seed(cfg.seed, point, trial)
        bits = np.random.default_rng(seed).integers(0, 2, cfg.bits, dtype=np.uint8)
        return end_to_end(bits, link_config(cfg, carrier, sched, predictor, M, k, snr, seed))
    return _ordered_map(one, range(cfg.trials))


def _merge(reports: list[RecoveryReport]):
    n = sum(r.n_bits for r in reports)
    e = sum(r.n_errors for r in reports)
    lanes = sum(s.n_lanes for r in reports for s in r.steps.values())
    power = sum(s.noise_power for r in reports for s in r.steps.values())
    sq = sum(s.sq_err for r in reports for s in r.steps.values())
    ns = sum(s.n_samples for r in reports for s in r.steps.values())
    eff = math.inf if power == 0 else lanes / power
    return n, e, eff, (sq / ns if ns else 0.0)


def _prepare(cfg: RunConfig):
    cfg.validate()
    carrier = cfg.carrier()
    sched = cfg.schedule()
    return carrier, sched, resolve_predictor(cfg, carrier, sched)


def cmd_sweep_snr(cfg: RunConfig) -> list[ResultRow]:
    """BER vs SNR for every modulation x Rician-k x SNR point.

    The ``step`` column holds ``t*`` when one step carried every frame,
    otherwise 0. With the oracle predictor the closed-form BER at the
    measured effective SNR goes to ``<out>.analytic.csv``.
    """
    carrier, sched, predictor = _prepare(cfg)
    sink = CsvSink(cfg.out)
    analytic = []
    try:
        for M in cfg.orders:
            for k in cfg.k_values:
                for snr in cfg.snr_grid:
                    point = cfg.canonical(mod=M, rician_k=k, snr=snr)
                    fp = cfg.fingerprint(mod=M, rician_k=k, snr=snr)
                    reports = run_point(cfg, carrier, sched, predictor, M, k, snr, point)
                    n, e, eff, mse = _merge(reports)
                    lo, hi = wilson(e, n)
                    steps = {t for r in reports for t in r.steps}
                    step = steps.pop() if (len(steps) == 1 and cfg.mode == "single") else 0
                    sink.add(ResultRow(fp, snr, step, e / n, lo, hi, mse, eff, None, cfg.seed))
                    if predictor == "oracle" and k == math.inf:
                        th = 0.0 if math.isinf(eff) else analytic_qam_ber(M, eff)
                        analytic.append((fp, snr, M, th))
    except StageError as exc:
        sink.truncate(str(exc))
        raise
    finally:
        sink.close()
    if analytic:
        with open(_sidecar(cfg.out, "analytic.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fingerprint", "snr_db", "mod", "ber_analytic"])
            for fp, snr, M, th in analytic:
                w.writerow([fp, _num(snr), M, _num(th)])
    return sink.rows


def _sidecar(out: str, suffix: str) -> str:
    stem, _ = os.path.splitext(out)
    return f"{stem}.{suffix}"


def cmd_sweep_steps(cfg: RunConfig) -> list[ResultRow]:
    """Per-step BER and extraction MSE across the reverse pass (multi mode).

    Rows run from the top of the window down, i.e. in reverse-process order.
    """
    if cfg.mode != "multi":
        raise ConfigError("sweep-steps needs mode=multi")
    carrier, sched, predictor = _prepare(cfg)
    M, k = cfg.orders[0], cfg.k_values[0]
    sink = CsvSink(cfg.out)
    try:
        for snr in cfg.snr_grid:
            point = cfg.canonical(mod=M, rician_k=k, snr=snr)
            fp = cfg.fingerprint(mod=M, rician_k=k, snr=snr)
            reports = run_point(cfg, carrier, sched, predictor, M, k, snr, point)
            lo_t, hi_t = cfg.window_range
            for t in range(hi_t, lo_t - 1, -1):
                sts = [r.steps[t] for r in reports if t in r.steps]
                n = sum(s.n_bits for s in sts)
                e = sum(s.n_errors for s in sts)
                ns = sum(s.n_samples for s in sts)
                mse = sum(s.sq_err for s in sts) / ns if ns else 0.0
                lanes = sum(s.n_lanes for s in sts)
                power = sum(s.noise_power for s in sts)
                eff = math.inf if power == 0 else (lanes / power if lanes else math.nan)
                lo, hi = wilson(e, n)
                sink.add(ResultRow(fp, snr, t, e / n if n else 0.0, lo, hi, mse, eff, None, cfg.seed))
    except StageError as exc:
        sink.truncate(str(exc))
        raise
    finally:
        sink.close()
    return sink.rows


def bench_variants(cfg: RunConfig):
    """Image carrier and its projected latent, both carrying the latent's payload."""
    img = cfg.image()
    lat = encode_latent(img, cfg.codec(img.shape))
    return {"image": img, "latent": lat}


def cmd_bench(cfg: RunConfig) -> tuple[list[ResultRow], dict]:
    """Median wall-clock per reverse step for image vs latent carriers.

    Both use an MLP with hidden widths equal to the input size, so the
    architecture scales with the carrier; weights are random because only
    timing is measured. Each repetition runs one multi-mode frame of
    ``bench_window`` steps with the same payload bits.
    """
    cfg.validate()
    sched = cfg.schedule()
    variants = bench_variants(cfg)
    M = cfg.orders[0]
    k_bits = int(np.log2(M))
    payload = min(v.size // 2 for v in variants.values()) * k_bits * cfg.bench_window
    bits = np.random.default_rng(cfg.seed).integers(0, 2, payload, dtype=np.uint8)
    window = (1, min(cfg.bench_window, sched.T))
    snr = cfg.snr_grid[0]
    sink = CsvSink(cfg.out)
    summary = {}
    try:
        for name, carrier in variants.items():
            d = carrier.size
            net = MLPPredictor.init(carrier.shape, sched, (d, d), cfg.emb_dim, seed=cfg.seed)
            lc = LinkConfig(carrier=carrier, sched=sched, M=M, mode="multi",
                            snr_db=None if math.isinf(snr) else snr, rician_k=cfg.k_values[0],
                            predictor=net, window=window, seed=cfg.seed)
            per_step = {t: [] for t in range(window[0], window[1] + 1)}
            totals, medians = [], []
            for _ in range(cfg.bench_reps):
                # payload spans exactly one frame on the latent; cap image to the same bits
                rep = end_to_end(bits, lc)
                secs = {t: sum(s.seconds) for t, s in rep.steps.items()}
                for t, v in secs.items():
                    per_step[t].append(v * 1e3)
                totals.append(sum(secs.values()) * 1e3)
                medians.append(statistics.median(secs.values()) * 1e3)
            fp = cfg.fingerprint(carrier_kind=name, snr=snr)
            for t in range(window[1], window[0] - 1, -1):
                sink.add(ResultRow(fp, snr, t, math.nan, math.nan, math.nan, math.nan, math.nan,
                                   statistics.median(per_step[t]), cfg.seed))
            summary[name] = {
                "elements": d,
                "reps": len(totals),
                "median_step_ms": statistics.median(medians),
                "median_total_ms": statistics.median(totals),
                "step_ms": medians,
                "total_ms": totals,
            }
    finally:
        sink.close()
    with open(_sidecar(cfg.out, "bench.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return sink.rows, summary


def training_set(cfg: RunConfig) -> list:
    """Synthetic carriers: one gradient, one checker, the rest seeded blobs."""
    H = cfg.carrier_size
    imgs = [synth_carrier(H, "gradient"), synth_carrier(H, "checker")]
    imgs += [synth_carrier(H, "gaussian-blob", 1000 + i) for i in range(max(0, cfg.train_set - 2))]
    if cfg.carrier_kind == "latent":
        codec = cfg.codec(imgs[0].shape)
        imgs = [encode_latent(c, codec) for c in imgs]
    return imgs


def heldout_mse(pred, data, sched, n: int = 256, seed: int = 12345) -> float:
    rng = np.random.default_rng(seed)
    data = np.stack([c.data for c in data])
    idx = rng.integers(0, data.shape[0], n)
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal((n,) + data.shape[1:])
    bshape = (-1,) + (1,) * (data.ndim - 1)
    x_t = np.sqrt(sched.alpha_bar[t - 1]).reshape(bshape) * data[idx] + np.sqrt(1 - sched.alpha_bar[t - 1]).reshape(bshape) * eps
    err = [np.mean((pred.predict(x_t[i], t[i]) - eps[i]) ** 2) for i in range(n)]
    return float(np.mean(err))


def smoothed(losses, window: int = 100) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    w = min(window, losses.size)
    c = np.cumsum(np.insert(losses, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def cmd_train(cfg: RunConfig) -> dict:
    """Train the MLP predictor; writes the checkpoint to ``out`` and
    ``<out>.loss.csv`` with one row per 100 steps."""
    cfg.validate()
    sched = cfg.schedule()
    data = training_set(cfg)
    tc = TrainConfig(hidden=cfg.hidden_widths, emb_dim=cfg.emb_dim, lr=cfg.lr, momentum=cfg.momentum,
                     batch_size=cfg.batch, steps=cfg.train_steps, seed=cfg.seed)
    tic = time.monotonic()
    res = train_mlp(data, tc, sched)
    elapsed = time.monotonic() - tic
    save_checkpoint(res.checkpoint, cfg.out)
    sm = smoothed(res.losses)
    with open(_sidecar(cfg.out, "loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "smoothed"])
        for s in range(0, len(res.losses), 100):
            w.writerow([s, _num(res.losses[s]), _num(sm[max(0, s - 99)] if s >= 99 else float(np.mean(res.losses[:s + 1])))])
    return {
        "checkpoint": cfg.out,
        "seconds": elapsed,
        "initial_smoothed": float(sm[0]),
        "final_smoothed": float(sm[-1]),
        "heldout_mse": heldout_mse(res.predictor, data, sched),
        "params": res.predictor.n_params,
    }


def _check(name, ok, measured, threshold, status=None):
    return {"check": name, "status": status or ("PASS" if ok else "FAIL"), "measured": measured, "threshold": threshold}


def cmd_verify(cfg: RunConfig) -> list[dict]:
    """Distribution-matching checks plus pipeline invariants.

    The main matching checks use ``scale_rule`` (``printed`` is expected to
    fail). Controls that apply the wrong carrier scale must be caught by the
    mean check, so they pass when the mismatch is detected.
    """
    carrier, sched, _ = _prepare(cfg)
    k = cfg.k_values[0]
    snr = cfg.verify_snr
    sigma2 = 0.0 if math.isinf(snr) else chan.snr_to_sigma(snr, cfg.signal_power)
    m = carrier.size // 2
    ch = chan.draw_channel(m, k, sigma2, np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    noise = chan.effective_noise(ch).reshape(carrier.shape)
    step = cfg.step or default_step(sched, noise)
    out = []
    if step is None:
        return [_check("matching_feasible", False, float(noise.max()), float(1 - sched.alpha_bar[-1]))]
    ms = match_to_channel(sched, step, noise)
    rep = verify_matching(ms, carrier.data, cfg.verify_trials, cfg.seed, scale_rule=cfg.scale_rule)
    out.append(_check("matching_mean_residual", rep.mean_ok, rep.mean_residual, rep.mean_tol))
    out.append(_check("matching_variance_ratio", rep.var_ok, rep.var_ratio, [1 - rep.var_tol, 1 + rep.var_tol]))
    out.append(_check("matching_ks_pvalue", rep.ks_ok, rep.ks_pvalue, rep.alpha))
    budget = ms.budget_residual()
    out.append(_check("variance_budget_identity", budget < 1e-12, budget, 1e-12))
    if sigma2 > 0:
        # the alpha_bar_p - noise rule overshoots the variance budget by 2 noise
        bad = match_to_channel(sched, step, noise, on_infeasible="clip", rule="printed")
        ctl = verify_matching(bad, carrier.data, cfg.verify_trials, cfg.seed + 2)
        out.append(_check("control_printed_rule_rejected", not ctl.var_ok, ctl.var_ratio,
                          [1 - ctl.var_tol, 1 + ctl.var_tol]))
    else:
        out.append(_check("control_printed_rule_rejected", True, None, None, status="SKIP"))
    for rule in ("printed", "identity"):
        if sigma2 == 0:
            out.append(_check(f"control_{rule}_scale_rejected", True, None, None, status="SKIP"))
            continue
        ctl = verify_matching(ms, carrier.data, cfg.verify_trials, cfg.seed + 1, scale_rule=rule)
        out.append(_check(f"control_{rule}_scale_rejected", not ctl.mean_ok, ctl.mean_residual, ctl.mean_tol))

    # pipeline invariants on the configured carrier
    rng = np.random.default_rng(cfg.seed)
    M = cfg.orders[0]
    nbits = 4 * carrier.size
    bits = rng.integers(0, 2, nbits, dtype=np.uint8)
    for mode in ("single", "multi"):
        lc = LinkConfig(carrier, sched, M=M, mode=mode, window=(1, min(4, sched.T)), seed=cfg.seed)
        r = end_to_end(bits, lc)
        out.append(_check(f"exact_inversion_{mode}", r.n_errors == 0, r.ber, 0.0))
    single = end_to_end(bits, LinkConfig(carrier, sched, M=M, mode="single", step=1, snr_db=snr if sigma2 else None, seed=cfg.seed))
    multi = end_to_end(bits, LinkConfig(carrier, sched, M=M, mode="multi", window=(1, 1), snr_db=snr if sigma2 else None, seed=cfg.seed))
    same = bool(np.array_equal(single.bits, multi.bits))
    out.append(_check("window1_multi_equals_single", same, int(np.count_nonzero(single.bits != multi.bits)), 0))
    if sigma2 > 0:
        bits = rng.integers(0, 2, 200_000, dtype=np.uint8)
        r = end_to_end(bits, LinkConfig(carrier, sched, M=M, snr_db=snr, seed=cfg.seed))
        p = analytic_qam_ber(M, r.eff_snr)
        z = abs(r.ber - p) / math.sqrt(max(p * (1 - p), 1e-300) / r.n_bits)
        out.append(_check("oracle_ber_matches_closed_form_sigma", z <= 3.0, z, 3.0))
    return out


def verify_summary(results: list[dict]) -> str:
    lines = []
    for r in results:
        meas = r["measured"]
        meas = f"{meas:.4g}" if isinstance(meas, float) else str(meas)
        lines.append(f"{r['status']:4s}  {r['check']:<40s} measured={meas} threshold={r['threshold']}")
    fails = sum(r["status"] == "FAIL" for r in results)
    lines.append(f"{len(results) - fails}/{len(results)} checks without failure")
    return "\n".join(lines)


def dump_json(results) -> str:
    buf = io.StringIO()
    json.dump(results, buf, indent=2, default=float)
    return buf.getvalue()
