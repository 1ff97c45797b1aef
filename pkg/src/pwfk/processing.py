"""B-mode post-processing with explicit backward passes.

Envelope detection (FFT-based analytic signal along depth), log compression
with clipping to a dynamic range, and an affine map onto [0, 1].  Each
array-level forward returns ``(output, saved)``; the matching backward takes
the upstream gradient and ``saved``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import hilbert as _analytic

from .core import BeamformedImage, ValidationError

LN10 = math.log(10.0)


@dataclass(frozen=True)
class ProcessingConfig:
    """Display settings.  Floors are relative to the per-image envelope maximum."""

    dynamic_range: float = 60.0
    log_floor: float = 1e-10
    envelope_floor: float = 1e-10

    def __post_init__(self):
        if not self.dynamic_range > 0:
            raise ValidationError("dynamic_range must be positive")
        if not (self.log_floor > 0 and self.envelope_floor > 0):
            raise ValidationError("floors must be positive")


def hilbert_axial(x: np.ndarray) -> np.ndarray:
    """Discrete Hilbert transform along axis 0.  Its transpose is its negative."""
    return np.imag(_analytic(x, axis=0))


@dataclass(frozen=True)
class EnvelopeSaved:
    x: np.ndarray
    hx: np.ndarray
    e_max: float


def envelope_forward(x: np.ndarray, cfg: ProcessingConfig = ProcessingConfig()):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 8:
        raise ValidationError("envelope detection needs at least 8 axial samples")
    hx = hilbert_axial(x)
    e = np.hypot(x, hx)
    return e, EnvelopeSaved(x, hx, float(e.max()))


def envelope_backward(grad: np.ndarray, saved: EnvelopeSaved,
                      cfg: ProcessingConfig = ProcessingConfig()) -> np.ndarray:
    floor = cfg.envelope_floor * saved.e_max
    e_hat = np.maximum(np.hypot(saved.x, saved.hx), floor if floor > 0 else np.finfo(float).tiny)
    return saved.x * grad / e_hat - hilbert_axial(saved.hx * grad / e_hat)


@dataclass(frozen=True)
class LogSaved:
    e: np.ndarray
    e_max: float
    active: np.ndarray  # True where neither floored nor clipped


def log_compress_forward(e: np.ndarray, cfg: ProcessingConfig = ProcessingConfig()):
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0):
        raise ValidationError("log compression needs a non-negative envelope")
    dr = cfg.dynamic_range
    e_max = float(e.max()) if e.size else 0.0
    if e_max == 0:
        return np.full(e.shape, -dr), LogSaved(e, 0.0, np.zeros(e.shape, bool))
    floor = cfg.log_floor * e_max
    raw = 20.0 * np.log10(np.maximum(e, floor) / e_max)
    active = (e > floor) & (raw > -dr)
    return np.clip(raw, -dr, 0.0), LogSaved(e, e_max, active)


def log_compress_backward(grad: np.ndarray, saved: LogSaved) -> np.ndarray:
    """Gradient with the per-image maximum held constant."""
    out = np.zeros_like(saved.e)
    a = saved.active
    out[a] = 20.0 / (LN10 * saved.e[a]) * np.asarray(grad)[a]
    return out


def to_unit_range_forward(x: np.ndarray, cfg: ProcessingConfig = ProcessingConfig()):
    dr = cfg.dynamic_range
    return (np.asarray(x, dtype=np.float64) + dr) / dr, None


def to_unit_range_backward(grad: np.ndarray, cfg: ProcessingConfig = ProcessingConfig()) -> np.ndarray:
    return np.asarray(grad) / cfg.dynamic_range


# -- image-level wrappers ------------------------------------------------------

def _expect(img: BeamformedImage, stage: str):
    if img.stage != stage:
        raise ValidationError(f"expected a {stage} image, got stage={img.stage}")


def envelope(img: BeamformedImage, cfg: ProcessingConfig = ProcessingConfig()) -> BeamformedImage:
    _expect(img, "migrated")
    e, _ = envelope_forward(img.pixels, cfg)
    return BeamformedImage(e, img.dz, img.dx, "envelope")


def log_compress(img: BeamformedImage, cfg: ProcessingConfig = ProcessingConfig()) -> BeamformedImage:
    _expect(img, "envelope")
    y, _ = log_compress_forward(img.pixels, cfg)
    return BeamformedImage(y, img.dz, img.dx, "log_db", cfg.dynamic_range)


def to_unit_range(img: BeamformedImage) -> BeamformedImage:
    _expect(img, "log_db")
    cfg = ProcessingConfig(dynamic_range=img.dynamic_range)
    y, _ = to_unit_range_forward(img.pixels, cfg)
    return BeamformedImage(np.clip(y, 0.0, 1.0), img.dz, img.dx, "normalized", img.dynamic_range)


def bmode(img: BeamformedImage, cfg: ProcessingConfig = ProcessingConfig()) -> BeamformedImage:
    """Migrated image -> normalized B-mode image in [0, 1]."""
    return to_unit_range(log_compress(envelope(img, cfg), cfg))


def normalized_to_linear(pixels: np.ndarray, dynamic_range: float) -> np.ndarray:
    """Invert the log/unit-range map: envelope relative to the image maximum."""
    db = np.asarray(pixels) * dynamic_range - dynamic_range
    return 10.0 ** (db / 20.0)


# -- export ------------------------------------------------------------------------

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(pixels), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: BeamformedImage, path) -> None:
    """Write a normalized image as 8-bit PGM (``.pgm``) or PNG (anything else)."""
    _expect(img, "normalized")
    u8 = to_uint8(img.pixels)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        h, w = u8.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(u8.tobytes())
    else:
        from PIL import Image

        Image.fromarray(u8, mode="L").save(path)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValidationError("not a binary PGM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = raw[pos + 1: pos + 1 + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / float(maxval)
