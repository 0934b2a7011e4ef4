"""Carrier tensors: procedural images, PPM files and the projected latent."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

SUPPORTED_SIZES = (8, 16, 32, 64)
PATTERNS = ("gradient", "checker", "gaussian-blob")


@dataclass(frozen=True)
class Carrier:
    data: np.ndarray
    kind: str = "image"
    ident: str = ""

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if self.kind not in ("image", "latent"):
            raise ValueError(f"unknown carrier kind {self.kind!r}")
        if d.size % 2:
            raise ValueError(f"carrier has odd element count {d.size}; cannot pack to complex")
        if not np.isfinite(d).all():
            raise ValueError("carrier values must be finite")
        if self.kind == "image" and (d.min(initial=0) < -1 or d.max(initial=0) > 1):
            raise ValueError("image carrier values must lie in [-1, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size


def synth_carrier(H: int, pattern: str = "gradient", seed: int = 0) -> Carrier:
    """Deterministic H x H x 3 stand-in image in [-1, 1].

    ``gradient`` ramps each row from -1 to 1, ``checker`` alternates +-1
    blocks, ``gaussian-blob`` places a seeded coloured blob on a -1 ground.
    Only the blob depends on ``seed``.
    """
    if H not in SUPPORTED_SIZES:
        raise ValueError(f"unsupported carrier size {H}; expected one of {SUPPORTED_SIZES}")
    if pattern == "gradient":
        row = np.linspace(-1.0, 1.0, H)
        img = np.broadcast_to(row[None, :, None], (H, H, 3)).copy()
    elif pattern == "checker":
        cell = max(1, H // 8)
        idx = np.arange(H) // cell
        board = np.where((idx[:, None] + idx[None, :]) % 2 == 0, 1.0, -1.0)
        img = np.repeat(board[:, :, None], 3, axis=2)
    elif pattern == "gaussian-blob":
        rng = np.random.default_rng(seed)
        cy, cx = rng.uniform(0.2, 0.8, size=2) * (H - 1)
        width = rng.uniform(0.1, 0.3) * H
        amp = rng.uniform(0.5, 1.0, size=3)
        yy, xx = np.mgrid[0:H, 0:H]
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        img = -1.0 + 2.0 * amp[None, None, :] * g[:, :, None]
    else:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    return Carrier(img, "image", f"{pattern}-{H}-{seed}")


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def load_ppm(path) -> Carrier:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, offset = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM header") from exc
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM is supported (maxval {maxval})")
    if w != h or w not in SUPPORTED_SIZES:
        raise ValueError(f"PPM must be square with side in {SUPPORTED_SIZES}, got {w}x{h}")
    raster = buf[offset:offset + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError("PPM raster is truncated")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return Carrier(px.astype(float) / 127.5 - 1.0, "image", os.path.basename(str(path)))


def save_ppm(carrier: Carrier, path) -> None:
    img = np.asarray(carrier.data if isinstance(carrier, Carrier) else carrier, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    px = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


@dataclass(frozen=True)
class LatentCodec:
    """Fixed analysis operator with orthonormal rows (no decoder)."""

    projection: np.ndarray
    image_shape: tuple[int, ...]
    latent_shape: tuple[int, ...]

    @property
    def ratio(self) -> float:
        return self.projection.shape[1] / self.projection.shape[0]


def default_latent_shape(H: int) -> tuple[int, int, int]:
    return (H // 4, H // 4, 6)


def build_codec(image_shape, latent_shape=None, seed: int = 0) -> LatentCodec:
    image_shape = tuple(int(d) for d in image_shape)
    if latent_shape is None:
        latent_shape = default_latent_shape(image_shape[0])
    latent_shape = tuple(int(d) for d in latent_shape)
    n_img, n_lat = int(np.prod(image_shape)), int(np.prod(latent_shape))
    if not 0 < n_lat <= n_img:
        raise ValueError(f"latent size {n_lat} must be in (0, {n_img}]")
    if n_lat % 2:
        raise ValueError("latent element count must be even")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n_img, n_lat)))
    # fix column signs so the factorization is unique for a given draw
    q = q * np.sign(np.diag(r))[None, :]
    P = np.ascontiguousarray(q.T)
    dev = np.abs(P @ P.T - np.eye(n_lat)).max()
    if dev > 1e-10:
        raise ArithmeticError(f"projection rows not orthonormal (deviation {dev:.3g})")
    P.setflags(write=False)
    return LatentCodec(P, image_shape, latent_shape)


def encode_latent(x0: Carrier, codec: LatentCodec) -> Carrier:
    if x0.kind != "image":
        raise ValueError("only image carriers can be encoded")
    if x0.shape != codec.image_shape:
        raise ValueError(f"image shape {x0.shape} != codec input {codec.image_shape}")
    z = codec.projection @ x0.data.ravel()
    return Carrier(z.reshape(codec.latent_shape), "latent", f"latent:{x0.ident}")
