"""Embed QAM-derived signals in the forward diffusion of a carrier, send
them over the channel and recover them with a noise predictor.

Two transmission modes:

``single``
    one tensor per frame, ``x = sqrt(abar_i) x0 + sqrt(1 - abar_i) s`` at a
    designated step ``t*`` with per-element matched ``abar_i``.
``multi``
    one tensor per step of a contiguous window ``[t_lo, t_hi]``. The first
    step is the single-mode embedding at ``t_lo`` (its block stands in for all
    noise up to ``t_lo``); later steps follow
    ``x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) s_t``. The receiver
    turns each snapshot into its noise component
    ``r_t = sqrt(1 - abar_t) eps_hat(x_t, t)`` and reads the block off
    consecutive components, ``(r_t - sqrt(alpha_t) r_{t-1}) / sqrt(1 - alpha_t)``.

Random streams are split from the master seed as
``SeedSequence(seed, spawn_key=(frame, role, step))``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import channel as chan
from .carrier import Carrier
from .denoiser import OraclePredictor, Predictor
from .modem import (
    SignalBlock,
    bits_per_symbol,
    demodulate,
    modulate,
    pad_bits,
    signal_to_symbols,
    symbols_to_signal,
)
from .schedule import (
    MatchedSchedule,
    NoiseSchedule,
    default_step,
    match_to_channel,
)

ROLE_PAYLOAD, ROLE_CHANNEL, ROLE_NOISE = 0, 1, 2
# channel redraws allowed per transmitted tensor before giving up
MAX_REDRAWS = 100


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass
class EmbeddedFrame:
    mode: str
    steps: list[int]
    payloads: dict[int, SignalBlock]
    samples: list[np.ndarray]
    ms: MatchedSchedule
    carrier: Carrier

    @property
    def window(self) -> tuple[int, int]:
        return self.steps[0], self.steps[-1]


def _check_shape(block: SignalBlock, carrier: Carrier, ms: MatchedSchedule):
    if block.shape != carrier.shape or ms.shape != carrier.shape:
        raise ValueError(f"payload {block.shape}, schedule {ms.shape} and carrier {carrier.shape} must agree")


def embed_single(carrier: Carrier, signal: SignalBlock, ms: MatchedSchedule) -> EmbeddedFrame:
    _check_shape(signal, carrier, ms)
    x = np.sqrt(ms.alpha_bar_i) * carrier.data + np.sqrt(1.0 - ms.alpha_bar_i) * signal.values
    return EmbeddedFrame("single", [ms.step], {ms.step: signal}, [x], ms, carrier)


def embed_multi(carrier: Carrier, payloads: dict[int, SignalBlock], ms: MatchedSchedule) -> EmbeddedFrame:
    """Trajectory snapshots over the window; ``ms.step`` must be its first step."""
    steps = sorted(payloads)
    if not steps or steps != list(range(steps[0], steps[-1] + 1)):
        raise ValueError(f"signal-bearing steps must be contiguous, got {steps}")
    if steps[0] != ms.step:
        raise ValueError(f"matched step {ms.step} must open the window {steps[0]}..{steps[-1]}")
    sched = ms.base
    sched.check_step(steps[-1])
    first = embed_single(carrier, payloads[steps[0]], ms)
    x = first.samples[0]
    samples = [x]
    for t in steps[1:]:
        _check_shape(payloads[t], carrier, ms)
        a = sched.a(t)
        x = np.sqrt(a) * x + np.sqrt(1.0 - a) * payloads[t].values
        samples.append(x)
    return EmbeddedFrame("multi", steps, dict(payloads), samples, ms, carrier)


def merge_weights(sched: NoiseSchedule, t_lo: int, t_hi: int) -> dict[int, float]:
    """Coefficient of each block in ``x_{t_hi}`` once the recursion is unrolled.

    With a matched first step, ``x_{t_hi} = sqrt(abar_{t_hi}) x0s + sum_t w_t s_t``
    where block ``t_lo`` carries ``sqrt(1 - abar_i)`` in place of its weight
    (returned here for the unmatched case ``abar_i = abar_{t_lo}``).
    """
    w = {}
    for t in range(t_lo, t_hi + 1):
        tail = math.prod(sched.a(u) for u in range(t + 1, t_hi + 1))
        own = 1.0 - sched.abar(t_lo) if t == t_lo else 1.0 - sched.a(t)
        w[t] = math.sqrt(tail * own)
    return w


def _ch_noise(ms: MatchedSchedule, ch) -> np.ndarray:
    if ch is None:
        return ms.noise
    return chan.effective_noise(ch).reshape(ms.shape)


def _predict(pred: Predictor, x, t: int):
    tic = time.perf_counter()
    eps = np.asarray(pred.predict(x, t), dtype=float)
    dt = time.perf_counter() - tic
    if eps.shape != np.shape(x) or not np.isfinite(eps).all():
        raise FloatingPointError(f"predictor returned invalid output at step {t}")
    return eps, dt


def _eff(var):
    with np.errstate(divide="ignore"):
        return np.where(var > 0, 1.0 / np.maximum(var, 1e-300), np.inf)


def recover_single(received, pred: Predictor, ms: MatchedSchedule, ch=None, extraction: str = "zf"):
    """Extract ``s_hat = sqrt(1 - abar_p) eps_hat / sqrt(1 - abar_i)``.

    The residual channel term has per-element variance
    ``noise_i / (1 - abar_i)``; ``mmse`` scales the zero-forcing estimate
    by ``1 / (1 + that variance)``. Returns ``(s_hat, diagnostics)``.
    """
    received = np.asarray(received, dtype=float)
    if received.shape != ms.shape:
        raise ValueError(f"received shape {received.shape} != carrier shape {ms.shape}")
    eps, dt = _predict(pred, received, ms.step)
    s_hat = np.sqrt(1.0 - ms.alpha_bar_p) * eps / np.sqrt(1.0 - ms.alpha_bar_i)
    resid = _ch_noise(ms, ch) / (1.0 - ms.alpha_bar_i)
    if extraction == "mmse":
        s_hat = s_hat / (1.0 + resid)
    elif extraction != "zf":
        raise ValueError(f"unknown extraction {extraction!r}")
    return s_hat, {"step": ms.step, "residual_var": resid, "eff_snr": _eff(resid), "seconds": dt}


def recover_multi(frames, pred: Predictor, ms: MatchedSchedule, channels=None, extraction: str = "zf"):
    """Recover every block of a multi-step frame, walking the window downwards.

    ``frames`` is the received :class:`EmbeddedFrame` (or a ``{step: tensor}``
    mapping); ``channels`` optionally maps step to its :class:`ChannelState`.
    Returns ``({step: s_hat}, {step: diagnostics})``.
    """
    if isinstance(frames, EmbeddedFrame):
        snaps = dict(zip(frames.steps, frames.samples))
    else:
        snaps = {int(t): np.asarray(v, dtype=float) for t, v in frames.items()}
    steps = sorted(snaps)
    if not steps or steps[0] != ms.step or steps != list(range(steps[0], steps[-1] + 1)):
        raise ValueError(f"received snapshots {steps} do not form the window starting at {ms.step}")
    channels = channels or {}
    sched = ms.base
    comps, noise, secs = {}, {}, {}
    for t in reversed(steps):
        eps, secs[t] = _predict(pred, snaps[t], t)
        comps[t] = np.sqrt(1.0 - sched.abar(t)) * eps
        noise[t] = _ch_noise(ms, channels.get(t)) if t in channels else (ms.noise if t == ms.step else np.zeros(ms.shape))
    out, diag = {}, {}
    for t in reversed(steps):
        if t == ms.step:
            s_hat = comps[t] / np.sqrt(1.0 - ms.alpha_bar_i)
            resid = noise[t] / (1.0 - ms.alpha_bar_i)
        else:
            a = sched.a(t)
            s_hat = (comps[t] - np.sqrt(a) * comps[t - 1]) / np.sqrt(1.0 - a)
            resid = (noise[t] + a * noise[t - 1]) / (1.0 - a)
        if extraction == "mmse":
            s_hat = s_hat / (1.0 + resid)
        elif extraction != "zf":
            raise ValueError(f"unknown extraction {extraction!r}")
        out[t] = s_hat
        diag[t] = {"step": t, "residual_var": resid, "eff_snr": _eff(resid), "seconds": secs[t]}
    return out, diag


@dataclass
class LinkConfig:
    """Everything :func:`end_to_end` needs for one operating point.

    ``snr_db=None`` means a noiseless channel. ``predictor`` is ``"oracle"``
    or any object with ``predict``. ``step`` fixes ``t*`` in single mode
    (default: largest feasible step); ``window`` is ``(t_lo, t_hi)`` for
    multi mode. ``signal_power`` is the per-complex-sample power the SNR
    refers to.
    """

    carrier: Carrier
    sched: NoiseSchedule
    M: int = 16
    mode: str = "single"
    snr_db: float | None = None
    rician_k: float = math.inf
    predictor: object = "oracle"
    step: int | None = None
    window: tuple[int, int] | None = None
    extraction: str = "zf"
    matching: str = "genie"
    on_infeasible: str = "clip"
    signal_power: float = 1.0
    seed: int = 0

    def __post_init__(self):
        bits_per_symbol(self.M)
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be single or multi, got {self.mode!r}")
        if self.matching not in ("genie", "statistical"):
            raise ValueError(f"matching must be genie or statistical, got {self.matching!r}")
        if self.mode == "multi":
            lo, hi = self.resolved_window
            if not 1 <= lo <= hi <= self.sched.T:
                raise ValueError(f"window {self.window} outside [1, {self.sched.T}]")

    @property
    def sigma_n2(self) -> float:
        return 0.0 if self.snr_db is None else chan.snr_to_sigma(self.snr_db, self.signal_power)

    @property
    def resolved_window(self) -> tuple[int, int]:
        if self.window is not None:
            return int(self.window[0]), int(self.window[1])
        return 1, max(1, self.sched.T // 2)

    @property
    def payload_bits(self) -> int:
        """Bits one transmitted tensor carries."""
        return (self.carrier.size // 2) * bits_per_symbol(self.M)


@dataclass
class StepStats:
    step: int
    n_bits: int = 0
    n_errors: int = 0
    sq_err: float = 0.0
    n_samples: int = 0
    noise_power: float = 0.0
    n_lanes: int = 0
    seconds: list[float] = field(default_factory=list)

    @property
    def ber(self) -> float:
        return self.n_errors / self.n_bits if self.n_bits else 0.0

    @property
    def mse(self) -> float:
        return self.sq_err / self.n_samples if self.n_samples else 0.0

    @property
    def eff_snr(self) -> float:
        if not self.n_lanes:
            return math.nan
        mean_var = self.noise_power / self.n_lanes
        return math.inf if mean_var == 0 else 1.0 / mean_var


@dataclass
class RecoveryReport:
    bits: np.ndarray
    n_bits: int
    n_errors: int
    steps: dict[int, StepStats]
    discarded: int = 0
    clipped: int = 0
    budget_residual: float = 0.0
    frames: int = 0

    @property
    def ber(self) -> float:
        return self.n_errors / self.n_bits if self.n_bits else 0.0

    @property
    def eff_snr(self) -> float:
        lanes = sum(s.n_lanes for s in self.steps.values())
        power = sum(s.noise_power for s in self.steps.values())
        if not lanes:
            return math.nan
        return math.inf if power == 0 else lanes / power

    @property
    def mse(self) -> float:
        n = sum(s.n_samples for s in self.steps.values())
        return sum(s.sq_err for s in self.steps.values()) / n if n else 0.0

    def same_result(self, other: "RecoveryReport") -> bool:
        """Equality ignoring wall-clock timings."""
        if not np.array_equal(self.bits, other.bits):
            return False
        key = lambda r: (r.n_bits, r.n_errors, r.discarded, r.clipped, r.budget_residual, r.frames,
                         [(s.step, s.n_bits, s.n_errors, s.sq_err, s.noise_power) for s in r.steps.values()])
        return key(self) == key(other)


def _draw_channel(cfg: LinkConfig, m: int, frame: int, step: int):
    discarded = 0
    for attempt in range(MAX_REDRAWS):
        seed = np.random.SeedSequence(cfg.seed, spawn_key=(frame, ROLE_CHANNEL, step, attempt))
        ch = chan.draw_channel(m, cfg.rician_k, cfg.sigma_n2, seed)
        if not ch.singular:
            return ch, discarded
        discarded += 1
    raise chan.SingularChannel(f"{MAX_REDRAWS} consecutive singular channel draws")


def _match_noise(cfg: LinkConfig, ch, shape):
    if cfg.matching == "statistical" or ch is None:
        # E|h|^2 = 1 for every Rician k; E|h|^-2 diverges, so use the mean power
        return np.full(shape, cfg.sigma_n2)
    return chan.effective_noise(ch).reshape(shape)


def _send(cfg: LinkConfig, x: np.ndarray, ch, frame: int, step: int) -> np.ndarray:
    z = chan.pack_complex(x)
    y = chan.transmit(chan.TransmitFrame(z, step, cfg.mode, cfg.carrier.ident), ch,
                      np.random.SeedSequence(cfg.seed, spawn_key=(frame, ROLE_NOISE, step)))
    return chan.unpack_complex(chan.zf_equalize(y, ch)).reshape(x.shape)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc


def _predictor_for(cfg: LinkConfig, ms: MatchedSchedule):
    if isinstance(cfg.predictor, str):
        if cfg.predictor != "oracle":
            raise ValueError(f"unknown predictor {cfg.predictor!r}")
        return OraclePredictor(ms.carrier_scale * cfg.carrier.data, cfg.sched)
    return cfg.predictor


def end_to_end(bits, cfg: LinkConfig) -> RecoveryReport:
    """Modulate, embed, transmit, equalize, recover and demodulate ``bits``.

    Bits fill carrier-sized blocks in order; in multi mode each frame holds
    one block per window step. Padding bits and padding samples never count
    towards BER; MSE covers every sample of each block.
    """
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size == 0:
        raise ValueError("no bits to send")
    padded, _ = _stage("modulate", pad_bits, bits, cfg.M)
    k = bits_per_symbol(cfg.M)
    cap = cfg.payload_bits
    shape = cfg.carrier.shape
    m = cfg.carrier.size // 2
    steps = [cfg.step] if cfg.mode == "single" else list(range(cfg.resolved_window[0], cfg.resolved_window[1] + 1))
    per_frame = cap * (1 if cfg.mode == "single" else len(steps))
    n_frames = -(-padded.size // per_frame)
    recovered = np.empty(padded.size, dtype=np.uint8)
    stats: dict[int, StepStats] = {}
    report = RecoveryReport(recovered, int(bits.size), 0, stats, frames=n_frames)

    for f in range(n_frames):
        chunk = padded[f * per_frame:(f + 1) * per_frame]
        blocks = [chunk[i:i + cap] for i in range(0, chunk.size, cap)]
        pay_rng = stream(cfg.seed, f, ROLE_PAYLOAD)

        first = steps[0]
        ch0, disc = _stage("channel", _draw_channel, cfg, m, f, 0)
        report.discarded += disc
        noise = _match_noise(cfg, ch0, shape)
        if cfg.mode == "single":
            t_star = cfg.step or default_step(cfg.sched, noise)
            if t_star is None:
                # nothing absorbs the worst element; the last step leaves the most room
                t_star = cfg.sched.T
            first = t_star
        ms = _stage("match", match_to_channel, cfg.sched, first, noise, cfg.on_infeasible)
        report.clipped += int(ms.clipped.sum())
        report.budget_residual = max(report.budget_residual, ms.budget_residual())

        frame_steps = [first] if cfg.mode == "single" else steps
        payloads = {}
        for t, blk in zip(frame_steps, blocks + [np.zeros(0, np.uint8)] * (len(frame_steps) - len(blocks))):
            syms = _stage("modulate", modulate, blk, cfg.M)
            payloads[t] = _stage("modulate", symbols_to_signal, syms, shape, cfg.M, pay_rng)

        if cfg.mode == "single":
            emb = _stage("embed", embed_single, cfg.carrier, payloads[first], ms)
        else:
            emb = _stage("embed", embed_multi, cfg.carrier, payloads, ms)

        channels, received = {first: ch0}, {}
        for t, x in zip(emb.steps, emb.samples):
            if t not in channels:
                channels[t], disc = _stage("channel", _draw_channel, cfg, m, f, t - first)
                report.discarded += disc
            received[t] = _stage("transmit", _send, cfg, x, channels[t], f, t)

        pred = _stage("predictor", _predictor_for, cfg, ms)
        if cfg.mode == "single":
            s_hat, d = _stage("recover", recover_single, received[first], pred, ms, ch0, cfg.extraction)
            est, diags = {first: s_hat}, {first: d}
        else:
            est, diags = _stage("recover", recover_multi, received, pred, ms, channels, cfg.extraction)

        offset = f * per_frame
        for j, t in enumerate(emb.steps):
            block = payloads[t]
            syms_hat = _stage("demodulate", signal_to_symbols, block.with_values(est[t]))
            got = _stage("demodulate", demodulate, syms_hat, cfg.M)
            n = block.length * k
            lo = offset + j * cap
            recovered[lo:lo + n] = got
            # bits beyond the caller's payload are padding
            n_real = max(0, min(n, bits.size - lo))
            st = stats.setdefault(t, StepStats(t))
            errs = int(np.count_nonzero(got[:n_real] != bits[lo:lo + n_real]))
            st.n_bits += n_real
            st.n_errors += errs
            report.n_errors += errs
            st.sq_err += float(np.sum((est[t] - block.values) ** 2))
            st.n_samples += block.values.size
            lanes = ~np.asarray(block.padding)
            st.noise_power += float(np.sum(diags[t]["residual_var"][lanes]))
            st.n_lanes += int(lanes.sum())
            st.seconds.append(diags[t]["seconds"])
    report.bits = recovered[:bits.size]
    return report
