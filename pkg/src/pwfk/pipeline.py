"""Glue between simulation, beamforming and datasets.

Presets bundle a probe and acquisition: ``full`` is the full-size default
(256 elements, 7.8 MHz, 75 angles over +-16 degrees) and ``desk`` is a small
low-frequency setup that keeps training runs to minutes on one CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (AcquisitionParams, BeamformedImage, DataSample, ProbeGeometry, RFFrame,
                   ValidationError, steering_angles)
from .migration import MigrationPlan, compound, migrate
from .processing import ProcessingConfig, bmode
from .simulate import Lesion, PhantomSpec, make_phantom, simulate_frames


@dataclass(frozen=True)
class Preset:
    name: str
    geometry: ProbeGeometry
    acquisition: AcquisitionParams
    phantom_width: float
    phantom_depth: float
    z_start: float
    density: float


def preset(name: str = "full", num_angles: int = 75, span_deg: float = 16.0) -> Preset:
    angles = steering_angles(num_angles, span_deg)
    if name == "full":
        geom = ProbeGeometry()
        acq = AcquisitionParams(num_samples=2048, angles=angles)
        return Preset(name, geom, acq, 40e-3, 40e-3, 5e-3, 20.0)
    if name == "desk":
        geom = ProbeGeometry(64, 0.6e-3)
        acq = AcquisitionParams(sampling_freq=10e6, center_freq=2.5e6, num_samples=256,
                                angles=angles)
        return Preset(name, geom, acq, 38.4e-3, 16e-3, 3e-3, 5.0)
    raise ValidationError(f"unknown preset {name!r}")


def migrate_all(frames, plan: MigrationPlan) -> list:
    return [migrate(f, plan) for f in frames]


def beamform(frames, plan: MigrationPlan, cfg: ProcessingConfig = ProcessingConfig()) -> BeamformedImage:
    """Normalized B-mode image of the coherent compound of ``frames``."""
    return bmode(compound(migrate_all(frames, plan)), cfg)


def single_angle_image(sample: DataSample, plan: MigrationPlan,
                       cfg: ProcessingConfig = ProcessingConfig()) -> BeamformedImage:
    return beamform([sample.frame_at(0.0)], plan, cfg)


def with_target(geom: ProbeGeometry, acq: AcquisitionParams, frames, lesion_class: str,
                plan: MigrationPlan | None = None,
                cfg: ProcessingConfig = ProcessingConfig()) -> DataSample:
    plan = MigrationPlan(geom, acq) if plan is None else plan
    frames = tuple(frames)
    return DataSample(geom, acq, frames, lesion_class, beamform(frames, plan, cfg))


def random_phantom(p: Preset, lesion_class: str, seed: int) -> PhantomSpec:
    """Speckle phantom with lesions drawn for ``lesion_class``.

    hypoechoic and hyperechoic samples hold one lesion of -6/-3 or +3/+6 dB,
    mixed samples hold one of each, normal samples none.
    """
    rng = np.random.default_rng(seed)
    r_lo, r_hi = 0.12 * p.phantom_depth, 0.18 * p.phantom_depth

    def lesion(contrasts, lateral):
        r = rng.uniform(r_lo, r_hi)
        x_max = p.phantom_width / 2 - r
        x = rng.uniform(*lateral) * x_max
        z = rng.uniform(p.z_start + r, p.z_start + p.phantom_depth - r)
        return Lesion(float(x), float(z), float(r), float(rng.choice(contrasts)))

    if lesion_class == "hypoechoic":
        lesions = (lesion((-6.0, -3.0), (-0.6, 0.6)),)
    elif lesion_class == "hyperechoic":
        lesions = (lesion((3.0, 6.0), (-0.6, 0.6)),)
    elif lesion_class == "mixed":
        lesions = (lesion((-6.0, -3.0), (-0.9, -0.4)), lesion((3.0, 6.0), (0.4, 0.9)))
    elif lesion_class == "normal":
        lesions = ()
    else:
        raise ValidationError(f"unknown lesion class {lesion_class!r}")
    return PhantomSpec("speckle_lesions", p.phantom_width, p.phantom_depth, p.z_start,
                       p.density, lesions, (), int(rng.integers(2 ** 31)))


def simulate_sample(spec: PhantomSpec, p: Preset, lesion_class: str,
                    plan: MigrationPlan | None = None,
                    cfg: ProcessingConfig = ProcessingConfig()) -> DataSample:
    frames = simulate_frames(make_phantom(spec), p.geometry, p.acquisition)
    return with_target(p.geometry, p.acquisition, frames, lesion_class, plan, cfg)


def zero_sample(geom: ProbeGeometry, acq: AcquisitionParams, lesion_class: str = "normal") -> DataSample:
    shape = (geom.num_elements, acq.num_samples)
    frames = tuple(RFFrame(np.zeros(shape), i) for i in range(len(acq.angles)))
    return DataSample(geom, acq, frames, lesion_class)
