"""Complex packing, block Rician fading with AWGN, and zero-forcing.

SNR convention: ``SNR = E|x_i|^2 / E|n_i|^2`` per complex channel use,
where ``n_i ~ CN(0, 2 sigma_n2)``; see :func:`snr_to_sigma`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# |h_i| below this rejects the realization instead of amplifying noise without bound
MIN_GAIN = 1e-6


class SingularChannel(ValueError):
    """A fading gain is too small to equalize."""


def pack_complex(z) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    if z.size % 2:
        raise ValueError(f"cannot pack odd length {z.size} into complex samples")
    m = z.size // 2
    return z[:m] + 1j * z[m:]


def unpack_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=complex).ravel()
    return np.concatenate([x.real, x.imag])


@dataclass(frozen=True)
class ChannelState:
    """One block-fading realization for ``m`` channel uses."""

    m: int
    k: float
    sigma_n2: float
    h: np.ndarray

    def __post_init__(self):
        if self.h.shape != (self.m,):
            raise ValueError(f"expected {self.m} gains, got shape {self.h.shape}")
        self.h.setflags(write=False)

    @property
    def singular(self) -> bool:
        return bool(np.any(np.abs(self.h) < MIN_GAIN))


@dataclass(frozen=True)
class TransmitFrame:
    x: np.ndarray
    step: int
    mode: str = "single"
    carrier_id: str = ""

    def __post_init__(self):
        if not np.isfinite(self.x).all():
            raise ValueError("transmit frame contains non-finite samples")


def draw_channel(m: int, k: float, sigma_n2: float, seed=None) -> ChannelState:
    """Rician gains ``sqrt(k/(k+1)) + sqrt(1/(k+1)) h_r`` with ``h_r ~ CN(0, 1)``.

    ``k = inf`` gives ``h = 1`` exactly and ``k = 0`` pure Rayleigh.
    """
    k = float(k)
    if m < 0:
        raise ValueError("m must be non-negative")
    if math.isnan(k) or k < 0:
        raise ValueError(f"Rician factor must be >= 0 or inf, got {k}")
    if not sigma_n2 >= 0:
        raise ValueError(f"noise variance must be >= 0, got {sigma_n2}")
    if math.isinf(k):
        return ChannelState(m, k, float(sigma_n2), np.ones(m, dtype=complex))
    rng = np.random.default_rng(seed)
    hr = (rng.standard_normal(m) + 1j * rng.standard_normal(m)) / np.sqrt(2.0)
    h = np.sqrt(k / (k + 1)) + np.sqrt(1 / (k + 1)) * hr
    return ChannelState(m, k, float(sigma_n2), h)


def transmit(frame, ch: ChannelState, seed=None) -> np.ndarray:
    """``y = h * x + n`` with ``n ~ CN(0, 2 sigma_n2)``."""
    x = frame.x if isinstance(frame, TransmitFrame) else np.asarray(frame, dtype=complex)
    if x.shape != (ch.m,):
        raise ValueError(f"frame has {x.size} samples, channel has {ch.m} uses")
    y = ch.h * x
    if ch.sigma_n2 > 0:
        rng = np.random.default_rng(seed)
        s = np.sqrt(ch.sigma_n2)
        y = y + s * (rng.standard_normal(ch.m) + 1j * rng.standard_normal(ch.m))
    return y


def zf_equalize(y, ch: ChannelState) -> np.ndarray:
    if ch.singular:
        raise SingularChannel(f"{int(np.sum(np.abs(ch.h) < MIN_GAIN))} gains below {MIN_GAIN}")
    return np.asarray(y, dtype=complex) / ch.h


def effective_noise(ch: ChannelState) -> np.ndarray:
    """Per-real-lane variance of the equalized noise, in ``unpack_complex`` order."""
    if ch.singular:
        raise SingularChannel("zero gain has unbounded equalized noise")
    v = ch.sigma_n2 / np.abs(ch.h) ** 2
    return np.concatenate([v, v])


def snr_to_sigma(snr_db: float, signal_power: float = 1.0) -> float:
    """Per-real-dimension noise variance for a given per-sample SNR in dB."""
    if not signal_power > 0:
        raise ValueError("signal power must be positive")
    return signal_power / (2.0 * 10.0 ** (snr_db / 10.0))
