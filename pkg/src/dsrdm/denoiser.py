"""Noise predictors: an exact oracle and a small trainable MLP.

Checkpoint layout (all little-endian)::

    b"DSRD"  u32 version  u32 n_matrices
    n_matrices x { u32 rows, u32 cols, rows*cols float64 row-major }
    u64 schedule fingerprint

Matrices alternate weight ``(in, out)`` and bias ``(1, out)``. The input
width is ``D + E``: the flattened sample followed by a sinusoidal
embedding of the step; ``D`` is the last layer's output width.

The network's raw output is a carrier estimate ``x0_hat``; the noise
prediction is ``(x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t)``, so the
schedule is needed to load a checkpoint. Training still minimises the
noise-prediction error, which weights carrier errors by ``abar / (1 - abar)``.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .schedule import NoiseSchedule

MAGIC = b"DSRD"
VERSION = 1
# inputs are clipped to this magnitude before the network sees them
INPUT_CLIP = 1e3


class Predictor(Protocol):
    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


class CheckpointError(ValueError):
    pass


class ScheduleMismatch(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def schedule_fingerprint(sched: NoiseSchedule) -> int:
    """64-bit FNV-1a over ``struct.pack('<Idd', T, beta_start, beta_end)``."""
    h = 0xCBF29CE484222325
    for byte in struct.pack("<Idd", sched.T, sched.beta_start, sched.beta_end):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class OraclePredictor:
    """Inverts the forward equation using the true carrier."""

    def __init__(self, x0, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=float)
        self.sched = sched

    def predict(self, x_t, t: int) -> np.ndarray:
        ab = self.sched.abar(t)
        return (np.asarray(x_t, dtype=float) - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab)


def oracle_predictor(x0, sched: NoiseSchedule) -> OraclePredictor:
    return OraclePredictor(getattr(x0, "data", x0), sched)


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(a):
    return a / (1.0 + np.exp(-a))


def _silu_grad(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


class MLPPredictor:
    """Fully connected epsilon-predictor on flattened samples, SiLU hidden units."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 sample_shape: tuple[int, ...], sched: NoiseSchedule, fingerprint: int | None = None):
        self.sched = sched
        self.fingerprint = schedule_fingerprint(sched) if fingerprint is None else fingerprint
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in biases]
        self.sample_shape = tuple(sample_shape)
        d = int(np.prod(self.sample_shape))
        if self.weights[-1].shape[1] != d:
            raise ValueError("output width does not match the sample size")
        self.emb_dim = self.weights[0].shape[0] - d
        for w_in, w_out in zip(self.weights, self.weights[1:]):
            if w_in.shape[1] != w_out.shape[0]:
                raise ValueError("layer widths are inconsistent")

    @classmethod
    def init(cls, sample_shape, sched: NoiseSchedule, hidden=(256, 256), emb_dim: int = 32, seed=None):
        rng = np.random.default_rng(seed)
        d = int(np.prod(sample_shape))
        widths = [d + emb_dim, *hidden, d]
        ws, bs = [], []
        for fan_in, fan_out in zip(widths, widths[1:]):
            ws.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, sample_shape, sched)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _inputs(self, x, t):
        x = np.clip(np.asarray(x, dtype=float), -INPUT_CLIP, INPUT_CLIP)
        batch = x.reshape(-1, int(np.prod(self.sample_shape)))
        t = np.broadcast_to(np.asarray(t), (batch.shape[0],))
        return np.concatenate([batch, time_embedding(t, self.emb_dim)], axis=1)

    def _forward(self, h):
        cache = [h]
        pre = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i < len(self.weights) - 1:
                pre.append(a)
                h = _silu(a)
                cache.append(h)
            else:
                h = a
        return h, cache, pre

    def _coeffs(self, t, n):
        """Per-row ``1/sqrt(1-abar)`` and ``sqrt(abar/(1-abar))``."""
        t = np.broadcast_to(np.asarray(t, dtype=int), (n,))
        if t.min() < 1 or t.max() > self.sched.T:
            raise ValueError(f"step outside [1, {self.sched.T}]")
        ab = self.sched.alpha_bar[t - 1]
        return (1.0 / np.sqrt(1.0 - ab))[:, None], np.sqrt(ab / (1.0 - ab))[:, None]

    def _eps(self, inp, out, t):
        a, b = self._coeffs(t, inp.shape[0])
        d = out.shape[1]
        return a * inp[:, :d] - b * out, b

    def predict(self, x_t, t) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=float)
        inp = self._inputs(x_t, t)
        out, _, _ = self._forward(inp)
        eps, _ = self._eps(inp, out, t)
        return np.nan_to_num(eps, nan=0.0, posinf=INPUT_CLIP, neginf=-INPUT_CLIP).reshape(x_t.shape)

    def loss_and_grads(self, x, t, target):
        """Mean squared noise-prediction error and its parameter gradients."""
        inp = self._inputs(x, t)
        target = np.asarray(target, dtype=float).reshape(inp.shape[0], -1)
        out, cache, pre = self._forward(inp)
        eps, b = self._eps(inp, out, t)
        diff = eps - target
        loss = float(np.mean(diff ** 2))
        g = -2.0 * b * diff / diff.size
        gws, gbs = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gws[i] = cache[i].T @ g
            gbs[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * _silu_grad(pre[i - 1])
        return loss, gws, gbs

    def to_checkpoint(self) -> "Checkpoint":
        mats = []
        for w, b in zip(self.weights, self.biases):
            mats += [w.copy(), b.reshape(1, -1).copy()]
        return Checkpoint(VERSION, mats, self.fingerprint, self.sample_shape)


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (256, 256)
    emb_dim: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    steps: int = 5000
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 1 or self.emb_dim < 2:
            raise ValueError(f"invalid training config: {self}")
        if any(h < 1 for h in self.hidden) or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class Checkpoint:
    version: int
    matrices: list[np.ndarray]
    fingerprint: int
    sample_shape: tuple[int, ...] | None = None

    def predictor(self, sched: NoiseSchedule, sample_shape=None) -> MLPPredictor:
        shape = sample_shape or self.sample_shape or (self.matrices[-1].shape[1],)
        return MLPPredictor(self.matrices[0::2], self.matrices[1::2], shape, sched, self.fingerprint)


@dataclass
class TrainResult:
    predictor: MLPPredictor
    checkpoint: Checkpoint
    losses: np.ndarray = field(repr=False)


def train_mlp(dataset, cfg: TrainConfig, sched: NoiseSchedule) -> TrainResult:
    """Momentum-SGD regression of the injected noise, t uniform on [1, T]."""
    data = np.stack([np.asarray(getattr(c, "data", c), dtype=float) for c in dataset])
    if data.shape[0] == 0:
        raise ValueError("training set is empty")
    shape = data.shape[1:]
    rng = np.random.default_rng(cfg.seed)
    net = MLPPredictor.init(shape, sched, cfg.hidden, cfg.emb_dim, rng)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    sq_ab = np.sqrt(sched.alpha_bar)
    sq_1m = np.sqrt(1.0 - sched.alpha_bar)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, data.shape[0], cfg.batch_size)
        t = rng.integers(1, sched.T + 1, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + shape)
        bshape = (-1,) + (1,) * len(shape)
        x_t = sq_ab[t - 1].reshape(bshape) * data[idx] + sq_1m[t - 1].reshape(bshape) * eps
        loss, gws, gbs = net.loss_and_grads(x_t, t, eps)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step} with {cfg}")
        losses[step] = loss
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in gws + gbs))
        k = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
        for i in range(len(net.weights)):
            vel_w[i] = cfg.momentum * vel_w[i] - cfg.lr * k * gws[i]
            vel_b[i] = cfg.momentum * vel_b[i] - cfg.lr * k * gbs[i]
            net.weights[i] += vel_w[i]
            net.biases[i] += vel_b[i]
    return TrainResult(net, net.to_checkpoint(), losses)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.matrices))]
    for m in ckpt.matrices:
        m = np.asarray(m, dtype="<f8")
        if m.ndim != 2:
            raise CheckpointError("checkpoint matrices must be 2-D")
        parts.append(struct.pack("<II", *m.shape))
        parts.append(np.ascontiguousarray(m).tobytes())
    parts.append(struct.pack("<Q", ckpt.fingerprint))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    mats = []
    for _ in range(count):
        if pos + 8 > len(buf):
            raise CheckpointError("truncated checkpoint")
        rows, cols = struct.unpack_from("<II", buf, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(buf):
            raise CheckpointError("truncated checkpoint")
        mats.append(np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(float))
        pos += nbytes
    if pos + 8 != len(buf):
        raise CheckpointError("checkpoint trailer missing or has extra bytes")
    (fp,) = struct.unpack_from("<Q", buf, pos)
    if count < 2 or count % 2:
        raise CheckpointError(f"expected weight/bias pairs, got {count} matrices")
    for w, b in zip(mats[0::2], mats[1::2]):
        if b.shape != (1, w.shape[1]):
            raise CheckpointError("bias shape does not match its weight")
    for w_in, w_out in zip(mats[0::2], mats[2::2]):
        if w_in.shape[1] != w_out.shape[0]:
            raise CheckpointError("layer dimensions are inconsistent")
    return Checkpoint(version, mats, fp)


def load_checkpoint(path, sched: NoiseSchedule, sample_shape=None,
                    allow_mismatch: bool = False) -> MLPPredictor:
    """Load a predictor; a schedule fingerprint mismatch warns and raises
    unless ``allow_mismatch`` is set."""
    ckpt = read_checkpoint(path)
    if ckpt.fingerprint != schedule_fingerprint(sched):
        msg = (f"checkpoint schedule fingerprint {ckpt.fingerprint:016x} != "
               f"{schedule_fingerprint(sched):016x} for T={sched.T}, beta=[{sched.beta_start}, {sched.beta_end}]")
        warnings.warn(msg, stacklevel=2)
        if not allow_mismatch:
            raise ScheduleMismatch(msg + "; pass allow_mismatch=True to override")
    return ckpt.predictor(sched, sample_shape)
