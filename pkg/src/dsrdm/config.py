"""Run configuration: flat ``key = value`` files plus command-line overrides."""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .carrier import (
    PATTERNS,
    SUPPORTED_SIZES,
    Carrier,
    build_codec,
    encode_latent,
    load_ppm,
    synth_carrier,
)
from .modem import SUPPORTED_ORDERS
from .schedule import NoiseSchedule, linear_schedule


class ConfigError(ValueError):
    pass


def parse_grid(text: str) -> list[float]:
    """``lo:hi:step`` (inclusive) or a comma list; ``inf`` means a noiseless channel."""
    text = str(text).strip()
    if not text:
        raise ConfigError("empty SNR grid")
    if ":" in text:
        try:
            lo, hi, step = (float(p) for p in text.split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad grid {text!r}; expected lo:hi:step") from exc
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad grid {text!r}")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}") from exc


def _ints(text) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).replace("x", ",").split(",") if p.strip())


def _bool(text) -> bool:
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    mode: str = "single"
    mod: str = "16"
    snr: str = "0:20:5"
    rician_k: str = "inf"
    carrier_kind: str = "image"
    carrier_size: int = 32
    carrier_pattern: str = "gaussian-blob"
    carrier_path: str = ""
    carrier_seed: int = 0
    latent_shape: str = ""
    codec_seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    window: str = ""
    step: int = 0
    predictor: str = "oracle"
    allow_mismatch: bool = False
    extraction: str = "zf"
    matching: str = "genie"
    signal_power: float = 1.0
    trials: int = 10
    bits: int = 100_000
    seed: int = 0
    out: str = "results.csv"
    # train
    train_steps: int = 5000
    train_set: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    batch: int = 64
    hidden: str = "256,256"
    emb_dim: int = 32
    # bench
    bench_reps: int = 20
    bench_window: int = 8
    # verify
    verify_trials: int = 10_000
    verify_snr: float = 10.0
    scale_rule: str = "matched"
    extra: dict = field(default_factory=dict, repr=False)

    # keys that change where results go, not what they are
    _NOT_FINGERPRINTED = ("out", "extra")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "extra"]

    def update(self, pairs: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types or key == "extra":
                raise ConfigError(f"unknown config key {key!r}")
            cur = getattr(self, key)
            try:
                if isinstance(cur, bool):
                    val = _bool(raw)
                elif isinstance(cur, int):
                    val = int(raw)
                elif isinstance(cur, float):
                    val = float(raw)
                else:
                    val = str(raw).strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            setattr(self, key, val)
        return self

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        pairs = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                k, v = line.split("=", 1)
                pairs[k.strip()] = v.strip()
        return cls().update(pairs)

    def canonical(self, **overrides) -> str:
        vals = {k: getattr(self, k) for k in self.keys() if k not in self._NOT_FINGERPRINTED}
        vals.update(overrides)
        return "\n".join(f"{k}={vals[k]}" for k in sorted(vals))

    def fingerprint(self, **overrides) -> str:
        return hashlib.sha256(self.canonical(**overrides).encode()).hexdigest()[:16]

    # derived values

    @property
    def orders(self) -> list[int]:
        return [int(p) for p in str(self.mod).split(",") if p.strip()]

    @property
    def snr_grid(self) -> list[float]:
        return parse_grid(self.snr)

    @property
    def k_values(self) -> list[float]:
        return [float(p) for p in str(self.rician_k).split(",") if p.strip()]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return _ints(self.hidden)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)

    @property
    def window_range(self) -> tuple[int, int]:
        if self.window:
            lo, hi = _ints(self.window.replace(":", ","))
            return lo, hi
        return 1, max(1, self.T // 2)

    def image(self) -> Carrier:
        if self.carrier_path:
            return load_ppm(self.carrier_path)
        return synth_carrier(self.carrier_size, self.carrier_pattern, self.carrier_seed)

    def codec(self, image_shape):
        shape = _ints(self.latent_shape) if self.latent_shape else None
        return build_codec(image_shape, shape, self.codec_seed)

    def carrier(self) -> Carrier:
        img = self.image()
        if self.carrier_kind == "latent":
            return encode_latent(img, self.codec(img.shape))
        return img

    def validate(self) -> "RunConfig":
        problems = []
        if self.mode not in ("single", "multi"):
            problems.append(f"mode must be single or multi, got {self.mode!r}")
        try:
            if not self.orders or any(m not in SUPPORTED_ORDERS for m in self.orders):
                problems.append(f"modulation orders {self.mod!r} not in {SUPPORTED_ORDERS}")
        except ValueError:
            problems.append(f"bad modulation list {self.mod!r}")
        try:
            if not self.snr_grid:
                problems.append("SNR grid is empty")
        except ConfigError as exc:
            problems.append(str(exc))
        try:
            if any(k < 0 or math.isnan(k) for k in self.k_values) or not self.k_values:
                problems.append(f"Rician k must be >= 0 or inf, got {self.rician_k!r}")
        except ValueError:
            problems.append(f"bad Rician k list {self.rician_k!r}")
        if self.carrier_kind not in ("image", "latent"):
            problems.append(f"carrier_kind must be image or latent, got {self.carrier_kind!r}")
        if self.carrier_path:
            if not os.path.exists(self.carrier_path):
                problems.append(f"carrier file not found: {self.carrier_path}")
        else:
            if self.carrier_size not in SUPPORTED_SIZES:
                problems.append(f"carrier_size must be one of {SUPPORTED_SIZES}")
            if self.carrier_pattern not in PATTERNS:
                problems.append(f"carrier_pattern must be one of {PATTERNS}")
        if self.predictor != "oracle" and not os.path.exists(self.predictor):
            problems.append(f"predictor checkpoint not found: {self.predictor}")
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            problems.append("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        else:
            try:
                lo, hi = self.window_range
                if not 1 <= lo <= hi <= self.T:
                    problems.append(f"window {lo}:{hi} outside [1, {self.T}]")
            except ValueError:
                problems.append(f"bad window {self.window!r}")
            if self.step and not 1 <= self.step <= self.T:
                problems.append(f"step {self.step} outside [1, {self.T}]")
        if self.trials < 1:
            problems.append("trials must be >= 1")
        if self.bits < 1:
            problems.append("bits per trial must be >= 1")
        if self.extraction not in ("zf", "mmse"):
            problems.append("extraction must be zf or mmse")
        if self.matching not in ("genie", "statistical"):
            problems.append("matching must be genie or statistical")
        if self.scale_rule not in ("matched", "printed", "identity"):
            problems.append("scale_rule must be matched, printed or identity")
        if self.signal_power <= 0:
            problems.append("signal_power must be positive")
        if self.bench_reps < 1 or self.bench_window < 1 or self.verify_trials < 100:
            problems.append("bench_reps, bench_window >= 1 and verify_trials >= 100 required")
        try:
            if not self.hidden_widths or min(self.hidden_widths) < 1:
                problems.append("hidden widths must be positive")
        except ValueError:
            problems.append(f"bad hidden widths {self.hidden!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def trial_seed(master: int, point: str, trial: int) -> int:
    """Per-trial seed: SeedSequence(master, spawn_key=(sha256 prefix of point key, trial))."""
    key = int.from_bytes(hashlib.sha256(point.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence(master, spawn_key=(key, trial)).generate_state(1)[0])
