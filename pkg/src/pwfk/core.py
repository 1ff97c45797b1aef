"""Domain types, unit conventions and the sample container format.

All lengths are in meters, times in seconds, frequencies in Hz and angles
in radians.  RF data is stored as ``[num_elements, num_samples]``; images
as ``[nz, nx]`` with depth along the first axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CONTAINER_VERSION = 1

STAGES = ("migrated", "envelope", "log_db", "normalized")
LESION_CLASSES = ("hyperechoic", "hypoechoic", "normal", "mixed")

DEFAULT_NUM_ELEMENTS = 256
DEFAULT_APERTURE = 50e-3
DEFAULT_SOUND_SPEED = 1540.0
DEFAULT_CENTER_FREQ = 7.8e6
DEFAULT_SAMPLING_FREQ = 31.25e6
DEFAULT_NUM_ANGLES = 75
DEFAULT_ANGLE_SPAN_DEG = 16.0


class ValidationError(ValueError):
    """Invalid input values or inconsistent dimensions."""


class ContainerFormatError(ValidationError):
    """Malformed container header."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class TruncationError(ContainerFormatError):
    """Payload size disagrees with the header."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ProbeGeometry:
    num_elements: int = DEFAULT_NUM_ELEMENTS
    pitch: float = DEFAULT_APERTURE / DEFAULT_NUM_ELEMENTS

    def __post_init__(self):
        if int(self.num_elements) != self.num_elements or self.num_elements < 2:
            raise ValidationError(f"num_elements must be an integer >= 2, got {self.num_elements}")
        if not (self.pitch > 0 and math.isfinite(self.pitch)):
            raise ValidationError(f"pitch must be positive, got {self.pitch}")
        object.__setattr__(self, "num_elements", int(self.num_elements))

    @property
    def element_positions(self) -> np.ndarray:
        """Lateral element centers, symmetric about 0."""
        n = self.num_elements
        return (np.arange(n) - (n - 1) / 2.0) * self.pitch

    @property
    def aperture(self) -> float:
        return self.num_elements * self.pitch


@dataclass(frozen=True)
class AcquisitionParams:
    sampling_freq: float = DEFAULT_SAMPLING_FREQ
    center_freq: float = DEFAULT_CENTER_FREQ
    sound_speed: float = DEFAULT_SOUND_SPEED
    num_samples: int = 2048
    t0: float = 0.0
    angles: tuple = (0.0,)

    def __post_init__(self):
        angles = tuple(float(a) for a in np.atleast_1d(self.angles))
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "num_samples", int(self.num_samples))
        if not self.sampling_freq > 2 * self.center_freq:
            raise ValidationError("sampling_freq must exceed twice the center frequency")
        if not self.center_freq > 0:
            raise ValidationError("center_freq must be positive")
        if not self.sound_speed > 0:
            raise ValidationError("sound_speed must be positive")
        if self.num_samples < 64:
            raise ValidationError(f"num_samples must be >= 64, got {self.num_samples}")
        if not angles:
            raise ValidationError("at least one steering angle is required")
        if any(abs(a) > math.pi / 2 or not math.isfinite(a) for a in angles):
            raise ValidationError("angles must lie in [-pi/2, pi/2]")
        if not math.isfinite(self.t0):
            raise ValidationError("t0 must be finite")

    @property
    def wavelength(self) -> float:
        return self.sound_speed / self.center_freq

    @property
    def dz(self) -> float:
        """Axial pixel size of the migration grid."""
        return self.sound_speed / (2.0 * self.sampling_freq)

    def angle_index(self, angle: float, atol: float = 1e-9) -> int:
        for i, a in enumerate(self.angles):
            if abs(a - angle) <= atol:
                return i
        raise ValidationError(f"angle {angle!r} rad is not among the acquisition angles")


def steering_angles(num_angles: int = DEFAULT_NUM_ANGLES,
                    span_deg: float = DEFAULT_ANGLE_SPAN_DEG) -> tuple:
    """Uniformly spaced steering angles over [-span, +span] degrees, in radians."""
    if num_angles < 1:
        raise ValidationError("num_angles must be >= 1")
    if num_angles == 1:
        return (0.0,)
    return tuple(np.deg2rad(np.linspace(-span_deg, span_deg, num_angles)).tolist())


@dataclass(frozen=True)
class RFFrame:
    data: np.ndarray
    angle_index: int = 0

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2:
            raise ValidationError(f"RF data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("RF data contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def num_elements(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RFFrame):
            return NotImplemented
        return self.angle_index == other.angle_index and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class BeamformedImage:
    pixels: np.ndarray
    dz: float
    dx: float
    stage: str = "migrated"
    dynamic_range: float | None = None

    def __post_init__(self):
        pixels = _frozen(self.pixels)
        if pixels.ndim != 2 or min(pixels.shape) < 1:
            raise ValidationError(f"image must be a non-empty 2-D array, got {pixels.shape}")
        if not (self.dz > 0 and self.dx > 0):
            raise ValidationError("pixel spacing must be positive")
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.stage in ("log_db", "normalized"):
            if self.dynamic_range is None or not self.dynamic_range > 0:
                raise ValidationError(f"stage {self.stage} requires a positive dynamic_range")
        elif self.dynamic_range is not None:
            raise ValidationError(f"stage {self.stage} carries no dynamic_range")
        if self.stage == "normalized" and (pixels.min() < 0 or pixels.max() > 1):
            raise ValidationError("normalized pixels must lie in [0, 1]")
        if self.stage == "log_db" and (pixels.min() < -self.dynamic_range or pixels.max() > 0):
            raise ValidationError("log_db pixels must lie in [-dynamic_range, 0]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def same_grid(self, other: "BeamformedImage") -> bool:
        return (self.shape == other.shape and math.isclose(self.dz, other.dz, rel_tol=1e-9)
                and math.isclose(self.dx, other.dx, rel_tol=1e-9))

    def __eq__(self, other):
        if not isinstance(other, BeamformedImage):
            return NotImplemented
        return (self.dz == other.dz and self.dx == other.dx and self.stage == other.stage
                and self.dynamic_range == other.dynamic_range
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True)
class DataSample:
    geometry: ProbeGeometry
    params: AcquisitionParams
    frames: tuple
    lesion_class: str = "normal"
    target: BeamformedImage | None = None

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.lesion_class not in LESION_CLASSES:
            raise ValidationError(f"unknown lesion class {self.lesion_class!r}")
        if sorted(f.angle_index for f in frames) != list(range(len(self.params.angles))):
            raise ValidationError("frames must cover every acquisition angle exactly once")
        for f in frames:
            if f.data.shape != (self.geometry.num_elements, self.params.num_samples):
                raise ValidationError(
                    f"frame shape {f.data.shape} does not match geometry/params "
                    f"({self.geometry.num_elements}, {self.params.num_samples})")
        if self.target is not None and self.target.stage != "normalized":
            raise ValidationError("target image must be stage=normalized")

    def frame_at(self, angle: float) -> RFFrame:
        idx = self.params.angle_index(angle)
        for f in self.frames:
            if f.angle_index == idx:
                return f
        raise ValidationError(f"no frame for angle index {idx}")


def normalize_rf(frame: RFFrame) -> RFFrame:
    """Scale a frame by its peak magnitude so values lie in [-1, 1]."""
    data = np.asarray(frame.data)
    if not np.all(np.isfinite(data)):
        raise ValidationError("RF data contains non-finite values")
    peak = np.max(np.abs(data)) if data.size else 0.0
    if peak == 0:
        return frame
    return RFFrame(data / peak, frame.angle_index)


# -- container I/O ----------------------------------------------------------

_HEADER_KEYS = ("version", "num_elements", "pitch_m", "sampling_freq_hz", "center_freq_hz",
                "sound_speed_mps", "num_samples", "t0_s", "angles_rad", "lesion_class",
                "has_target")
_TARGET_KEYS = ("target_nz", "target_nx", "target_dz_m", "target_dx_m",
                "target_dynamic_range_db")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_container(sample: DataSample, path) -> None:
    """Write ``sample`` as a text header followed by a float32 little-endian payload.

    Frames are written in angle order as ``[angle][element][sample]``; the
    target image, if present, follows as ``[nz][nx]``.
    """
    g, p = sample.geometry, sample.params
    header = {
        "version": str(CONTAINER_VERSION),
        "num_elements": str(g.num_elements),
        "pitch_m": _fmt(g.pitch),
        "sampling_freq_hz": _fmt(p.sampling_freq),
        "center_freq_hz": _fmt(p.center_freq),
        "sound_speed_mps": _fmt(p.sound_speed),
        "num_samples": str(p.num_samples),
        "t0_s": _fmt(p.t0),
        "angles_rad": ",".join(_fmt(a) for a in p.angles),
        "lesion_class": sample.lesion_class,
        "has_target": "1" if sample.target is not None else "0",
    }
    if sample.target is not None:
        t = sample.target
        header.update({
            "target_nz": str(t.shape[0]),
            "target_nx": str(t.shape[1]),
            "target_dz_m": _fmt(t.dz),
            "target_dx_m": _fmt(t.dx),
            "target_dynamic_range_db": _fmt(t.dynamic_range),
        })
    text = "".join(f"{k}: {v}\n" for k, v in header.items()) + "\n"

    ordered = sorted(sample.frames, key=lambda f: f.angle_index)
    payload = np.stack([f.data for f in ordered]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(text.encode("ascii"))
        fh.write(payload.tobytes())
        if sample.target is not None:
            fh.write(np.asarray(sample.target.pixels, dtype="<f4").tobytes())


def _parse_header(raw: bytes) -> tuple[dict, int]:
    end = raw.find(b"\n\n")
    if end < 0:
        raise ContainerFormatError("header is not terminated by a blank line")
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ContainerFormatError("header is not ASCII text") from exc
    header = {}
    for line in text.split("\n"):
        key, sep, value = line.partition(":")
        if not sep:
            raise ContainerFormatError(f"malformed header line {line!r}", key=key.strip() or None)
        header[key.strip()] = value.strip()
    return header, end + 2


def _get(header: dict, key: str, conv):
    if key not in header:
        raise ContainerFormatError("missing key", key=key)
    try:
        return conv(header[key])
    except (TypeError, ValueError) as exc:
        raise ContainerFormatError(f"bad value {header[key]!r}", key=key) from exc


def read_container(path) -> DataSample:
    raw = Path(path).read_bytes()
    header, offset = _parse_header(raw)

    version = _get(header, "version", int)
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"unsupported version {version}", key="version")
    angles = _get(header, "angles_rad",
                  lambda s: tuple(float(v) for v in s.split(",") if v.strip()))
    has_target = _get(header, "has_target", int)
    if has_target not in (0, 1):
        raise ContainerFormatError("must be 0 or 1", key="has_target")
    lesion_class = _get(header, "lesion_class", str)
    if lesion_class not in LESION_CLASSES:
        raise ContainerFormatError(f"unknown class {lesion_class!r}", key="lesion_class")

    try:
        geom = ProbeGeometry(_get(header, "num_elements", int), _get(header, "pitch_m", float))
    except ContainerFormatError:
        raise
    except ValidationError as exc:
        raise ContainerFormatError(str(exc), key="num_elements") from exc
    try:
        params = AcquisitionParams(
            sampling_freq=_get(header, "sampling_freq_hz", float),
            center_freq=_get(header, "center_freq_hz", float),
            sound_speed=_get(header, "sound_speed_mps", float),
            num_samples=_get(header, "num_samples", int),
            t0=_get(header, "t0_s", float),
            angles=angles,
        )
    except ContainerFormatError:
        raise
    except ValidationError as exc:
        raise ContainerFormatError(str(exc), key="acquisition") from exc

    n_frame = len(angles) * geom.num_elements * params.num_samples
    n_target = 0
    if has_target:
        nz = _get(header, "target_nz", int)
        nx = _get(header, "target_nx", int)
        n_target = nz * nx
    payload = np.frombuffer(raw, dtype="<f4", offset=offset) if len(raw) > offset else \
        np.empty(0, dtype="<f4")
    if (len(raw) - offset) % 4 or payload.size != n_frame + n_target:
        raise TruncationError(
            f"payload holds {(len(raw) - offset) / 4:g} floats, header implies "
            f"{n_frame + n_target}")

    data = payload[:n_frame].astype(np.float64).reshape(
        len(angles), geom.num_elements, params.num_samples)
    frames = tuple(RFFrame(d, i) for i, d in enumerate(data))
    target = None
    if has_target:
        target = BeamformedImage(
            payload[n_frame:].astype(np.float64).reshape(nz, nx),
            dz=_get(header, "target_dz_m", float),
            dx=_get(header, "target_dx_m", float),
            stage="normalized",
            dynamic_range=_get(header, "target_dynamic_range_db", float),
        )
    return DataSample(geom, params, frames, lesion_class, target)


def read_key_values(path) -> dict:
    """Parse a ``key: value`` (or ``key = value``) text file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in (":", "="):
            if sep in line:
                key, value = line.split(sep, 1)
                out[key.strip()] = value.strip()
                break
        else:
            raise ContainerFormatError(f"line {lineno}: expected 'key: value'", key=line)
    return out
