"""Stolt f-k migration for steered plane waves, its exact adjoint, and compounding.

The migration is a fixed linear map from RF data ``[num_elements, num_samples]``
to an image ``[nz, nx]`` on the grid ``z = i * c / (2 fs)``, ``x = element
positions``.  It is built from zero padding, FFTs, a steering/t0 phase ramp,
resampling along the temporal-frequency axis, a depth-dependent lateral
shear and cropping; :func:`migrate_adjoint` applies the transposes of the
same stages in reverse order.

Steered plane waves are handled with an exploding-reflector approximation:
after advancing every trace by its transmit delay the two-way travel time
to a point at depth ``z`` is fitted, to second order around the scatterer,
by a one-way hyperbola with velocity ``c / sqrt(1 + cos(a) + sin(a)**2)``
whose apex sits at depth ``z * sqrt(1 + cos(a)) / (2 - cos(a))`` and is
shifted laterally by ``z * sin(a) / (2 - cos(a))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (AcquisitionParams, BeamformedImage, ProbeGeometry, RFFrame,
                   ValidationError)

INTERP_KINDS = ("linear", "spline")
TABLE_CACHE_SIZE = 4  # per plan; each entry holds O(pad_time * pad_lateral) arrays


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def erm_velocity(sound_speed: float, angle: float) -> float:
    return sound_speed / math.sqrt(1.0 + math.cos(angle) + math.sin(angle) ** 2)


def erm_depth_factor(angle: float) -> float:
    """Ratio of exploding-reflector depth to true depth."""
    return math.sqrt(1.0 + math.cos(angle)) / (2.0 - math.cos(angle))


def erm_lateral_shift(angle: float) -> float:
    """Lateral displacement of the migrated point per unit depth."""
    return math.sin(angle) / (2.0 - math.cos(angle))


@dataclass(frozen=True)
class MigrationPlan:
    geom: ProbeGeometry
    acq: AcquisitionParams
    pad_time: int = 0
    pad_lateral: int = 0
    interp: str = "linear"
    _tables: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ns, ne = self.acq.num_samples, self.geom.num_elements
        if not self.pad_time:
            object.__setattr__(self, "pad_time", next_pow2(2 * ns))
        if not self.pad_lateral:
            object.__setattr__(self, "pad_lateral", 2 * ne)
        if self.pad_time < ns or self.pad_lateral < ne:
            raise ValidationError("padded sizes must not be smaller than the data")
        if self.interp not in INTERP_KINDS:
            raise ValidationError(f"unknown interpolation {self.interp!r}")

    @property
    def nz(self) -> int:
        return self.acq.num_samples

    @property
    def nx(self) -> int:
        return self.geom.num_elements

    @property
    def dz(self) -> float:
        return self.acq.dz

    @property
    def dx(self) -> float:
        return self.geom.pitch

    @property
    def data_shape(self) -> tuple:
        return (self.geom.num_elements, self.acq.num_samples)

    @property
    def image_shape(self) -> tuple:
        return (self.nz, self.nx)

    def tables(self, angle: float) -> "_AngleTables":
        key = round(float(angle), 12)
        tab = self._tables.pop(key, None)
        if tab is None:
            tab = _AngleTables(self, float(angle))
        self._tables[key] = tab
        while len(self._tables) > TABLE_CACHE_SIZE:
            self._tables.pop(next(iter(self._tables)))
        return tab


def _interp_taps(u: np.ndarray, kind: str):
    """Tap offsets and weights for interpolating at fractional bin positions ``u``."""
    m0 = np.floor(u)
    frac = u - m0
    if kind == "linear":
        return m0.astype(np.int64), (np.array([0, 1]), np.stack([1.0 - frac, frac]))
    # Keys cubic convolution, a = -0.5
    t = frac
    w = np.stack([
        ((-0.5 * t + 1.0) * t - 0.5) * t,
        (1.5 * t - 2.5) * t * t + 1.0,
        ((-1.5 * t + 2.0) * t + 0.5) * t,
        (0.5 * t - 0.5) * t * t,
    ])
    return m0.astype(np.int64), (np.array([-1, 0, 1, 2]), w)


class _AngleTables:
    """Precomputed phase ramps and resampling taps for one steering angle."""

    def __init__(self, plan: MigrationPlan, angle: float):
        geom, acq = plan.geom, plan.acq
        nt, nxp = plan.pad_time, plan.pad_lateral
        ne, ns = geom.num_elements, acq.num_samples
        c, fs = acq.sound_speed, acq.sampling_freq

        f = np.fft.fftfreq(nt, d=1.0 / fs)
        kx = np.fft.fftfreq(nxp, d=geom.pitch)

        # trace advance so that the transmit delay depends on (x_scatterer - x_element) only
        dt = -math.sin(angle) * geom.element_positions / c
        self.phase = np.exp(-2j * np.pi * f[:, None] * (acq.t0 + dt[None, :]))

        v = erm_velocity(c, angle)
        a = 2.0 / (c * erm_depth_factor(angle))  # ERM axial wavenumber per output Hz
        f_out = f[:, None]
        f_in = np.sign(f_out) * v * np.sqrt(kx[None, :] ** 2 + (a * f_out) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            jac = np.where(f_in != 0, (v * a) ** 2 * np.abs(f_out) / np.abs(f_in), 0.0)

        u = f_in * nt / fs
        m0, (offs, w) = _interp_taps(u, plan.interp)
        taps = m0[None] + offs[:, None, None]
        in_band = (taps >= -nt // 2) & (taps <= nt // 2)
        rows = np.mod(taps, nt)
        # evanescent input components (|f| < v |kx|) are removed before resampling
        f_src = f[rows]
        propagating = np.abs(f_src) >= v * np.abs(kx)[None, None, :]
        self.rows = rows
        self.weights = np.where(in_band & propagating, w * jac[None], 0.0)
        self.cols = np.broadcast_to(np.arange(nxp), (nt, nxp))

        z = np.arange(ns) * acq.dz
        self.shear = np.exp(2j * np.pi * kx[None, :] * erm_lateral_shift(angle) * z[:, None])
        self.shape = (nt, nxp)
        self.ne, self.ns = ne, ns

    def forward(self, data: np.ndarray) -> np.ndarray:
        nt, nxp = self.shape
        ne, ns = self.ne, self.ns
        x = np.zeros((nt, ne), dtype=np.complex128)
        x[:ns] = np.asarray(data, dtype=np.float64).T
        spec = np.fft.fft(x, axis=0) * self.phase
        spec = np.fft.fft(spec, n=nxp, axis=1)
        out = np.zeros_like(spec)
        for k in range(self.rows.shape[0]):
            out += self.weights[k] * spec[self.rows[k], self.cols]
        img = np.fft.ifft(out, axis=0)[:ns] * self.shear
        img = np.fft.ifft(img, axis=1)[:, :ne]
        return img.real

    def adjoint(self, image: np.ndarray) -> np.ndarray:
        nt, nxp = self.shape
        ne, ns = self.ne, self.ns
        g = np.zeros((ns, nxp), dtype=np.complex128)
        g[:, :ne] = image
        g = np.fft.fft(g, axis=1) / nxp * np.conj(self.shear)
        g = np.fft.fft(g, n=nt, axis=0) / nt
        flat = (self.rows * nxp + self.cols[None]).ravel()
        wg = (self.weights * g[None]).ravel()
        size = nt * nxp
        spec = (np.bincount(flat, weights=wg.real, minlength=size)
                + 1j * np.bincount(flat, weights=wg.imag, minlength=size)).reshape(nt, nxp)
        spec = np.fft.ifft(spec, axis=1)[:, :ne] * nxp
        spec *= np.conj(self.phase)
        x = np.fft.ifft(spec, axis=0)[:ns] * nt
        return x.real.T.copy()


def _check_data(data: np.ndarray, plan: MigrationPlan) -> np.ndarray:
    data = np.asarray(data)
    if data.shape != plan.data_shape:
        raise ValidationError(f"data shape {data.shape} does not match plan {plan.data_shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("RF data contains non-finite values")
    return data


def migrate_array(data: np.ndarray, plan: MigrationPlan, angle: float = 0.0) -> np.ndarray:
    """Array-level migration: ``[num_elements, num_samples] -> [nz, nx]``."""
    plan.acq.angle_index(angle)
    return plan.tables(angle).forward(_check_data(data, plan))


def migrate(frame: RFFrame, plan: MigrationPlan) -> BeamformedImage:
    if not 0 <= frame.angle_index < len(plan.acq.angles):
        raise ValidationError(f"angle index {frame.angle_index} outside the acquisition")
    angle = plan.acq.angles[frame.angle_index]
    pixels = migrate_array(frame.data, plan, angle)
    return BeamformedImage(pixels, plan.dz, plan.dx, stage="migrated")


def migrate_adjoint(grad_image, plan: MigrationPlan, angle: float = 0.0) -> np.ndarray:
    """Transpose of :func:`migrate_array`: ``[nz, nx] -> [num_elements, num_samples]``."""
    g = np.asarray(grad_image, dtype=np.float64)
    if g.shape != plan.image_shape:
        raise ValidationError(f"gradient shape {g.shape} does not match image {plan.image_shape}")
    plan.acq.angle_index(angle)
    return plan.tables(angle).adjoint(g)


def compound(images) -> BeamformedImage:
    """Pixelwise mean of migrated images sharing one grid."""
    images = list(images)
    if not images:
        raise ValidationError("cannot compound an empty list of images")
    first = images[0]
    for im in images[1:]:
        if im.stage != first.stage:
            raise ValidationError("all images must share one stage")
        if not first.same_grid(im):
            raise ValidationError("all images must share one grid")
    mean = np.mean(np.stack([im.pixels for im in images]), axis=0)
    return BeamformedImage(mean, first.dz, first.dx, first.stage, first.dynamic_range)


def operator_norm(plan: MigrationPlan, angle: float = 0.0, iters: int = 30, seed: int = 0) -> float:
    """Power-iteration estimate of the largest singular value of the migration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(plan.data_shape)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        y = migrate_adjoint(migrate_array(x, plan, angle), plan, angle)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        sigma = math.sqrt(norm)
        x = y / norm
    return sigma
