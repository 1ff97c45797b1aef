"""Synthetic plane-wave RF channel data from point-scatterer phantoms.

The forward model is linear single scattering in a homogeneous medium:
a steered plane wave reaches each scatterer, which re-radiates a spherical
wave back to every element.  No directivity and no attenuation are
modelled, so a point scatterer produces an exactly known arrival time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (AcquisitionParams, ProbeGeometry, RFFrame, ValidationError,
                   read_key_values)

PHANTOM_KINDS = ("speckle_lesions", "wires", "cyst")
DEFAULT_FRACTIONAL_BANDWIDTH = 0.67


@dataclass(frozen=True)
class Scatterer:
    x: float
    z: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.z, self.amplitude)):
            raise ValidationError("scatterer fields must be finite")
        if not self.z > 0:
            raise ValidationError(f"scatterer depth must be positive, got {self.z}")


@dataclass(frozen=True)
class Lesion:
    x: float
    z: float
    radius: float
    contrast_db: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError("lesion radius must be positive")
        if not -40.0 <= self.contrast_db <= 40.0:
            raise ValidationError("lesion contrast must lie in [-40, 40] dB")


@dataclass(frozen=True)
class PhantomSpec:
    """Scatterer phantom over ``x in [-width/2, width/2]``, ``z in [z_start, z_start + depth]``."""

    kind: str = "speckle_lesions"
    width: float = 20e-3
    depth: float = 20e-3
    z_start: float = 5e-3
    density: float = 20.0  # scatterers per mm^2
    lesions: tuple = ()
    wire_positions: tuple = ()
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValidationError(f"unknown phantom kind {self.kind!r}")
        if not (self.width > 0 and self.depth > 0):
            raise ValidationError("phantom region must be non-empty")
        if not self.z_start > 0:
            raise ValidationError("phantom region must lie at positive depth")
        if self.density < 0:
            raise ValidationError("density must be non-negative")
        lesions = tuple(l if isinstance(l, Lesion) else Lesion(*l) for l in self.lesions)
        for l in lesions:
            if (abs(l.x) + l.radius > self.width / 2 + 1e-12
                    or l.z - l.radius < self.z_start - 1e-12
                    or l.z + l.radius > self.z_start + self.depth + 1e-12):
                raise ValidationError(f"lesion {l} extends outside the phantom region")
        object.__setattr__(self, "lesions", lesions)
        object.__setattr__(self, "wire_positions",
                           tuple((float(x), float(z)) for x, z in self.wire_positions))

    @property
    def z_end(self) -> float:
        return self.z_start + self.depth


def make_phantom(spec: PhantomSpec) -> list:
    """Draw the scatterer list described by ``spec`` (deterministic in ``rng_seed``)."""
    if spec.kind == "wires":
        return [Scatterer(x, z, 1.0) for x, z in spec.wire_positions]

    lesions = spec.lesions
    if spec.kind == "cyst" and not lesions:
        r = min(spec.width, spec.depth) / 5
        lesions = (Lesion(0.0, spec.z_start + spec.depth / 2, r, -30.0),)

    rng = np.random.default_rng(spec.rng_seed)
    area_mm2 = spec.width * spec.depth * 1e6
    n = int(round(spec.density * area_mm2))
    x = rng.uniform(-spec.width / 2, spec.width / 2, n)
    z = rng.uniform(spec.z_start, spec.z_end, n)
    amp = rng.standard_normal(n)
    for l in lesions:
        inside = (x - l.x) ** 2 + (z - l.z) ** 2 <= l.radius ** 2
        amp[inside] *= 10.0 ** (l.contrast_db / 20.0)
    keep = z > 0
    scatterers = [Scatterer(float(a), float(b), float(c))
                  for a, b, c in zip(x[keep], z[keep], amp[keep])]
    scatterers.extend(Scatterer(wx, wz, 1.0) for wx, wz in spec.wire_positions)
    return scatterers


def phantom_spec_from_file(path) -> PhantomSpec:
    """Read a phantom description; lengths in mm, contrasts in dB.

    Recognised keys: kind, width_mm, depth_mm, z_start_mm, density_per_mm2,
    lesions (``x,z,radius,contrast_db`` groups separated by ``;``),
    wires (``x,z`` pairs separated by ``;``), seed.
    """
    kv = read_key_values(path)

    def groups(text, size):
        out = []
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            vals = [float(v) for v in chunk.split(",")]
            if len(vals) != size:
                raise ValidationError(f"expected {size} values in {chunk!r}")
            out.append(vals)
        return out

    lesions = [Lesion(x * 1e-3, z * 1e-3, r * 1e-3, c)
               for x, z, r, c in groups(kv.get("lesions", ""), 4)]
    wires = [(x * 1e-3, z * 1e-3) for x, z in groups(kv.get("wires", ""), 2)]
    defaults = PhantomSpec()
    return PhantomSpec(
        kind=kv.get("kind", defaults.kind),
        width=float(kv.get("width_mm", defaults.width * 1e3)) * 1e-3,
        depth=float(kv.get("depth_mm", defaults.depth * 1e3)) * 1e-3,
        z_start=float(kv.get("z_start_mm", defaults.z_start * 1e3)) * 1e-3,
        density=float(kv.get("density_per_mm2", defaults.density)),
        lesions=tuple(lesions),
        wire_positions=tuple(wires),
        rng_seed=int(kv.get("seed", defaults.rng_seed)),
    )


# -- RF synthesis -------------------------------------------------------------

def pulse_sigma(center_freq: float, fractional_bandwidth: float = DEFAULT_FRACTIONAL_BANDWIDTH) -> float:
    """Temporal standard deviation of a Gaussian envelope with the given -6 dB bandwidth."""
    bw = fractional_bandwidth * center_freq
    sigma_f = bw / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    return 1.0 / (2.0 * math.pi * sigma_f)


def gaussian_pulse(t, center_freq: float, sigma: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-0.5 * (t / sigma) ** 2) * np.cos(2.0 * np.pi * center_freq * t)


def travel_times(xs, zs, geom: ProbeGeometry, acq: AcquisitionParams, angle: float):
    """Two-way arrival times ``[n_scatterers, n_elements]`` and receive distances.

    The transmit reference is the steered plane wave passing ``(0, 0)`` at t = 0.
    """
    xs = np.asarray(xs, dtype=np.float64)[:, None]
    zs = np.asarray(zs, dtype=np.float64)[:, None]
    xe = geom.element_positions[None, :]
    c = acq.sound_speed
    dist = np.hypot(xe - xs, zs)
    tx = (zs * math.cos(angle) + xs * math.sin(angle)) / c
    return tx + dist / c, dist


def simulate_rf(scatterers, geom: ProbeGeometry, acq: AcquisitionParams, angle: float,
                fractional_bandwidth: float = DEFAULT_FRACTIONAL_BANDWIDTH,
                chunk: int = 2048) -> RFFrame:
    """Synthesise one steered plane-wave receive frame.

    Each scatterer contributes ``amplitude / max(r, dz) * p(t - tau)`` to every
    element, with ``p`` a Gaussian-modulated cosine.  Contributions are
    accumulated in scatterer order, so the result is deterministic.
    """
    idx = acq.angle_index(angle)
    ne, ns = geom.num_elements, acq.num_samples
    out = np.zeros(ne * ns)
    sc = list(scatterers)
    if not sc:
        return RFFrame(out.reshape(ne, ns), idx)

    xs = np.array([s.x for s in sc])
    zs = np.array([s.z for s in sc])
    amps = np.array([s.amplitude for s in sc])
    if np.any(zs <= 0):
        raise ValidationError("scatterers must lie at positive depth")

    fs, f0 = acq.sampling_freq, acq.center_freq
    sigma = pulse_sigma(f0, fractional_bandwidth)
    half = int(math.ceil(5.0 * sigma * fs))
    # rows carry a margin on both sides; clipped centres land entirely
    # inside the margin, which is dropped at the end
    margin = 2 * half + 1
    row = ns + 2 * margin
    acc = np.zeros(ne * row)
    elem_base = (np.arange(ne) * row)[None, :]
    # pulse(k/fs - d) = Re[exp(a_k) * exp(k * b) * exp(g)] with per-echo b, g
    k_all = np.arange(-half, half + 1)
    a_k = np.exp(-0.5 * (k_all / (sigma * fs)) ** 2 + 2j * np.pi * f0 * k_all / fs)
    any_inside = False

    for start in range(0, len(sc), chunk):
        sl = slice(start, start + chunk)
        tau, dist = travel_times(xs[sl], zs[sl], geom, acq, angle)
        weight = amps[sl, None] / np.maximum(dist, acq.dz)
        pos = (tau - acq.t0) * fs
        centre = np.rint(pos)
        if np.any((centre >= -half) & (centre < ns + half)):
            any_inside = True
        centre = np.clip(centre, -half - 1, ns + half).astype(np.int64)
        d = (pos - centre) / fs
        step = np.exp(d / (sigma ** 2 * fs))
        common = weight * np.exp(-0.5 * (d / sigma) ** 2 - 2j * np.pi * f0 * d)
        ramp = common * step ** (-half)
        flat0 = elem_base + centre + margin
        for i, k in enumerate(k_all):
            vals = (a_k[i] * ramp).real
            acc += np.bincount((flat0 + k).ravel(), weights=vals.ravel(), minlength=ne * row)
            ramp = ramp * step
    out = acc.reshape(ne, row)[:, margin: margin + ns]

    if not any_inside:
        warnings.warn("all echoes fall outside the recorded time window; frame is zero",
                      RuntimeWarning, stacklevel=2)
    return RFFrame(out, idx)


def simulate_frames(scatterers, geom: ProbeGeometry, acq: AcquisitionParams, **kwargs) -> tuple:
    """One frame per acquisition angle, in angle order."""
    sc = list(scatterers)
    return tuple(simulate_rf(sc, geom, acq, a, **kwargs) for a in acq.angles)
