"""Variance-preserving noise schedules and training-free channel matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

class MatchInfeasible(ValueError):
    """Channel noise exceeds what the pre-trained noise level can absorb."""


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha[t-1]`` is alpha_t; ``alpha_bar[t-1]`` is the product up to t."""

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def __post_init__(self):
        for a in (self.alpha, self.alpha_bar):
            a.setflags(write=False)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[self.check_step(t) - 1])

    def a(self, t: int) -> float:
        return float(self.alpha[self.check_step(t) - 1])


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    return NoiseSchedule(int(T), alpha, np.cumprod(alpha), float(beta_start), float(beta_end))


def forward_sample(x0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"carrier shape {x0.shape} != noise shape {eps.shape}")
    ab = sched.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def default_step(sched: NoiseSchedule, noise, margin: float = 0.01) -> int | None:
    """Largest step whose noise level ``1 - alpha_bar`` exceeds the worst
    channel noise by ``margin``; ``None`` if no step can absorb it."""
    need = float(np.max(noise)) + margin if np.size(noise) else margin
    ok = np.nonzero(1.0 - sched.alpha_bar > need)[0]
    return int(ok[-1]) + 1 if ok.size else None


@dataclass(frozen=True)
class MatchedSchedule:
    """Per-element schedule at step ``step`` that absorbs the channel noise.

    ``alpha_bar_i = alpha_bar_p + noise_i``, so the embedding noise
    ``1 - alpha_bar_i`` plus the equalized channel noise ``noise_i`` is
    exactly the pre-trained variance ``1 - alpha_bar_p``. The carrier is
    rescaled by ``carrier_scale = sqrt(alpha_bar_i / alpha_bar_p)`` so the
    means agree as well. Elements flagged in ``clipped`` could not be
    matched and keep ``alpha_bar_i = alpha_bar_p``.
    """

    base: NoiseSchedule
    step: int
    noise: np.ndarray
    alpha_bar_i: np.ndarray
    carrier_scale: np.ndarray
    clipped: np.ndarray = field(repr=False)

    @property
    def alpha_bar_p(self) -> float:
        return self.base.abar(self.step)

    @property
    def w(self) -> np.ndarray:
        # diagonal of the received covariance (1 - alpha_bar_i) + noise_i
        return (1.0 - self.alpha_bar_i) + self.noise

    @property
    def w_prime(self) -> np.ndarray:
        return self.w / np.sqrt(1.0 - self.alpha_bar_i)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.alpha_bar_i.shape

    def budget_residual(self) -> float:
        """Worst deviation from the variance budget over matched elements."""
        ok = ~self.clipped
        if not ok.any():
            return 0.0
        return float(np.max(np.abs(self.w - (1.0 - self.alpha_bar_p))[ok]))


def match_to_channel(sched: NoiseSchedule, step: int, noise, on_infeasible: str = "raise",
                     rule: str = "budget") -> MatchedSchedule:
    """Solve the training-free matching for per-element noise variances ``noise``.

    ``rule="printed"`` uses ``alpha_bar_p - noise_i`` instead; it overshoots
    the variance budget by ``2 noise_i`` and exists only as a control.
    ``on_infeasible="clip"`` leaves unmatchable elements at ``alpha_bar_p``
    (flagged in ``clipped``) instead of raising.
    """
    ab = sched.abar(step)
    noise = np.asarray(noise, dtype=float)
    if np.any(noise < 0) or not np.isfinite(noise).all():
        raise ValueError("channel noise variances must be finite and non-negative")
    if rule == "budget":
        abi = ab + noise
        bad = abi >= 1.0
    elif rule == "printed":
        abi = ab - noise
        bad = abi <= 0.0
    else:
        raise ValueError(f"unknown matching rule {rule!r}")
    if bad.any():
        if on_infeasible != "clip":
            room = 1 - ab if rule == "budget" else ab
            raise MatchInfeasible(
                f"channel noise up to {noise.max():.4g} exceeds the {room:.4g} available "
                f"at step {step} under the {rule} rule"
            )
        abi = np.where(bad, ab, abi)
    scale = np.sqrt(abi / ab)
    for a in (noise, abi, scale, bad):
        a.setflags(write=False)
    return MatchedSchedule(sched, int(step), noise, abi, scale, bad)


@dataclass
class MatchReport:
    trials: int
    mean_residual: float
    var_ratio: float
    worst_var_dev: float
    ks_stat: float
    ks_pvalue: float
    mean_tol: float = 0.01
    var_tol: float = 0.02
    alpha: float = 0.01

    @property
    def mean_ok(self) -> bool:
        return self.mean_residual < self.mean_tol

    @property
    def var_ok(self) -> bool:
        return abs(self.var_ratio - 1.0) <= self.var_tol

    @property
    def ks_ok(self) -> bool:
        return self.ks_pvalue >= self.alpha

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.var_ok


def claimed_scale(ms: MatchedSchedule, rule: str) -> np.ndarray:
    """Carrier rescale under a named rule.

    ``matched`` is sqrt(alpha_bar_i / alpha_bar_p), the one that equates the
    means. ``printed`` is the reciprocal ratio and ``identity`` skips
    rescaling; both exist as negative controls.
    """
    if rule == "matched":
        return ms.carrier_scale
    if rule == "printed":
        return np.sqrt(ms.alpha_bar_p / ms.alpha_bar_i)
    if rule == "identity":
        return np.ones(ms.shape)
    raise ValueError(f"unknown carrier scale rule {rule!r}")


def verify_matching(ms: MatchedSchedule, x0, trials: int = 10_000, seed=None,
                    scale_rule: str = "matched", M: int | None = None,
                    chunk: int = 1000, ks_cap: int = 200_000) -> MatchReport:
    """Monte-Carlo check that embedded signal plus channel noise looks like
    pre-trained forward noise around the rescaled carrier.

    Per trial, the received sample is
    ``sqrt(abar_i) x0 + sqrt(1 - abar_i) s + sqrt(noise) n``
    and the reference is ``sqrt(abar_p) x0s + sqrt(1 - abar_p) eps``.
    ``mean_residual`` estimates the RMS over elements of the bias of
    ``Z - sqrt(abar_p) x0s``: the mean square of the per-element sample means
    minus their expected sampling part ``var / trials``, floored at zero; ``var_ratio`` is the element-averaged sample
    variance of that residual over ``1 - abar_p``. The KS test compares the
    pooled standardized residuals of both paths. ``M`` switches the embedded
    signal from Gaussian to standardized QAM lanes.
    """
    if trials < 100:
        raise ValueError("verify_matching needs at least 100 trials")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != ms.shape:
        raise ValueError(f"carrier shape {x0.shape} != matched shape {ms.shape}")
    rng = np.random.default_rng(seed)
    ab = ms.alpha_bar_p
    x0s = claimed_scale(ms, scale_rule) * x0
    centre = np.sqrt(ab) * x0s
    sd_total = np.sqrt(1.0 - ab)
    mean_emb = np.sqrt(ms.alpha_bar_i) * x0
    sd_emb = np.sqrt(1.0 - ms.alpha_bar_i)
    sd_ch = np.sqrt(ms.noise)
    if M is not None:
        from .modem import alphabet_moments, constellation
        mu, sig = alphabet_moments(M)
        lanes = (np.concatenate([constellation(M).real, constellation(M).imag]) - mu) / sig

    s1 = np.zeros(ms.shape)
    s2 = np.zeros(ms.shape)
    pooled_z, pooled_ref = [], []
    kept = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        shape = (b,) + ms.shape
        if M is None:
            sig_draw = rng.standard_normal(shape)
        else:
            sig_draw = rng.choice(lanes, size=shape)
        z = mean_emb + sd_emb * sig_draw + sd_ch * rng.standard_normal(shape)
        r = z - centre
        s1 += r.sum(axis=0)
        s2 += (r * r).sum(axis=0)
        if kept < ks_cap:
            take = min(ks_cap - kept, r.size)
            ref = centre + sd_total * rng.standard_normal(shape)
            pooled_z.append((r / sd_total).ravel()[:take])
            pooled_ref.append(((ref - centre) / sd_total).ravel()[:take])
            kept += take
        done += b
    mean = s1 / trials
    var = (s2 - trials * mean ** 2) / (trials - 1)
    rel = var / (1.0 - ab)
    ks = stats.ks_2samp(np.concatenate(pooled_z), np.concatenate(pooled_ref))
    return MatchReport(
        trials=trials,
        mean_residual=float(np.sqrt(max(0.0, np.mean(mean ** 2) - np.mean(var) / trials))),
        var_ratio=float(rel.mean()),
        worst_var_dev=float(np.max(np.abs(rel - 1.0))),
        ks_stat=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
    )
