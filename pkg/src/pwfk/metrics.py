"""Image quality metrics: global image-pair scores, ROI contrast and FWHM.

Global metrics compare an evaluated image ``x`` with a target ``y``.  Local
metrics compare a lesion region with a background region.  Degenerate
cases return sentinels (``inf``, ``-inf`` or ``nan``) instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .core import BeamformedImage, ValidationError

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def _pixels(img) -> np.ndarray:
    if isinstance(img, BeamformedImage):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _pair(x, y):
    x, y = _pixels(x), _pixels(y)
    if x.shape != y.shape:
        raise ValidationError(f"image shapes differ: {x.shape} vs {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("images contain non-finite values")
    return x.ravel(), y.ravel()


def l1(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def l2(x, y) -> float:
    """Root mean squared difference."""
    x, y = _pair(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the target ``y``."""
    err = l2(x, y)
    if err == 0:
        return math.inf
    return float(20.0 * np.log10(np.max(_pixels(y)) / err))


def ncc(x, y) -> float:
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if denom == 0:
        return math.nan
    return float(np.sum(dx * dy) / denom)


def global_metrics(x, y) -> dict:
    return {"l1": l1(x, y), "l2": l2(x, y), "psnr": psnr(x, y), "ncc": ncc(x, y)}


# -- local (ROI) metrics -----------------------------------------------------------

@dataclass(frozen=True)
class RoiPair:
    """Lesion disk (region 1) and concentric background ring (region 2)."""

    region1: np.ndarray
    region2: np.ndarray
    center: tuple = (0.0, 0.0)  # (x, z) in meters
    radii: tuple = ()

    def __post_init__(self):
        r1 = np.asarray(self.region1, dtype=bool)
        r2 = np.asarray(self.region2, dtype=bool)
        if r1.shape != r2.shape:
            raise ValidationError("ROI masks must share a shape")
        if not r1.any() or not r2.any():
            raise ValidationError("ROI masks must be non-empty")
        if np.any(r1 & r2):
            raise ValidationError("ROI masks must be disjoint")
        object.__setattr__(self, "region1", r1)
        object.__setattr__(self, "region2", r2)


def disk_ring_roi(shape, dz: float, dx: float, center, radius: float,
                  inner: float = 0.8, ring=(1.2, 1.8), x0: float | None = None) -> RoiPair:
    """ROI pair for a lesion of nominal ``radius`` centred at ``center = (x, z)``.

    Pixel ``(i, j)`` sits at depth ``i * dz`` and lateral position
    ``x0 + j * dx``; by default the lateral axis is centred on 0.
    """
    nz, nx = shape
    if x0 is None:
        x0 = -(nx - 1) / 2.0 * dx
    zz = np.arange(nz)[:, None] * dz
    xx = x0 + np.arange(nx)[None, :] * dx
    r = np.hypot(xx - center[0], zz - center[1])
    r_in, (r_lo, r_hi) = inner * radius, (ring[0] * radius, ring[1] * radius)
    return RoiPair(r <= r_in, (r >= r_lo) & (r <= r_hi), tuple(center), (r_in, r_lo, r_hi))


def _regions(roi: RoiPair, image):
    px = _pixels(image)
    if px.shape != roi.region1.shape:
        raise ValidationError("ROI and image shapes differ")
    return px[roi.region1], px[roi.region2]


def cr(roi: RoiPair, image) -> float:
    """Contrast ratio in dB; intensities must be on a linear (positive) scale."""
    a, b = _regions(roi, image)
    m1, m2 = float(a.mean()), float(b.mean())
    if m1 <= 0 or m2 <= 0:
        raise ValidationError("contrast ratio needs positive region means")
    return 20.0 * math.log10(m1 / m2)


def cnr(roi: RoiPair, image) -> float:
    a, b = _regions(roi, image)
    m1, m2 = float(a.mean()), float(b.mean())
    noise = math.sqrt((float(a.var()) + float(b.var())) / 2.0)
    diff = abs(m1 - m2)
    if diff == 0:
        return -math.inf if noise > 0 else math.nan
    if noise == 0:
        return math.inf
    return 20.0 * math.log10(diff / noise)


def gcnr(roi: RoiPair, image, bins: int = 256) -> float:
    """One minus the overlap of the two regions' intensity densities."""
    a, b = _regions(roi, image)
    return gcnr_values(a, b, bins)


def gcnr_values(a, b, bins: int = 256) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("gCNR needs two non-empty regions")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    # unit-mass bin probabilities; equal to density times bin width, without
    # dividing by a width that can underflow for very narrow ranges
    p1 = np.histogram(a, edges)[0] / a.size
    p2 = np.histogram(b, edges)[0] / b.size
    return float(min(max(1.0 - np.sum(np.minimum(p1, p2)), 0.0), 1.0))


# -- resolution ---------------------------------------------------------------------

@dataclass(frozen=True)
class WireRoi:
    """Pixel window ``[z0:z1, x0:x1]`` around a single point target."""

    z0: int
    z1: int
    x0: int
    x1: int

    def window(self, pixels: np.ndarray) -> np.ndarray:
        return np.asarray(pixels)[self.z0:self.z1, self.x0:self.x1]


def select_wire_roi(image, center_px, half_size=(8, 8)) -> WireRoi:
    """Window around ``center_px = (iz, ix)``, checked to hold exactly one bright blob."""
    px = _pixels(image)
    iz, ix = center_px
    hz, hx = half_size
    roi = WireRoi(max(iz - hz, 0), min(iz + hz + 1, px.shape[0]),
                  max(ix - hx, 0), min(ix + hx + 1, px.shape[1]))
    win = roi.window(px)
    if win.size == 0:
        raise ValidationError("wire ROI lies outside the image")
    lo, hi = float(win.min()), float(win.max())
    if hi <= lo:
        raise ValidationError("wire ROI holds no intensity maximum")
    _, count = ndimage.label(win >= lo + 0.5 * (hi - lo))
    if count != 1:
        raise ValidationError(f"wire ROI holds {count} separate maxima, expected one")
    return roi


@dataclass(frozen=True)
class GaussianFit:
    baseline: float
    height: float
    mean: float
    sigma: float
    residual: float
    converged: bool


def fit_gaussian(profile, max_iter: int = 100, rtol: float = 1e-8) -> GaussianFit:
    """Least-squares fit of ``a + b * exp(-(u - mu)**2 / (2 sigma**2))`` to a 1-D profile."""
    p = np.asarray(profile, dtype=np.float64)
    u = np.arange(p.size, dtype=np.float64)
    a0 = float(p.min())
    w = p - a0
    b0 = float(w.max())
    mu0 = float(np.argmax(p))
    if b0 <= 0:
        return GaussianFit(a0, 0.0, mu0, math.nan, 0.0, False)
    s0 = math.sqrt(max(float(np.sum(w * (u - mu0) ** 2) / np.sum(w)), 0.25))

    def resid(q):
        a, b, mu, s = q
        return a + b * np.exp(-0.5 * ((u - mu) / s) ** 2) - p

    def jac(q):
        a, b, mu, s = q
        g = np.exp(-0.5 * ((u - mu) / s) ** 2)
        return np.stack([np.ones_like(u), g, b * g * (u - mu) / s ** 2,
                         b * g * (u - mu) ** 2 / s ** 3], axis=1)

    try:
        sol = optimize.least_squares(resid, [a0, b0, mu0, s0], jac=jac, method="lm",
                                     xtol=rtol, ftol=rtol, gtol=rtol, max_nfev=max_iter)
    except (ValueError, np.linalg.LinAlgError):
        return GaussianFit(a0, b0, mu0, math.nan, math.inf, False)
    a, b, mu, s = sol.x
    residual = float(np.sqrt(np.mean(sol.fun ** 2)))
    ok = bool(sol.status > 0 and np.isfinite(sol.x).all())
    return GaussianFit(float(a), float(b), float(mu), abs(float(s)), residual, ok)


@dataclass(frozen=True)
class FwhmResult:
    fwhm: float  # meters, nan when the fit failed
    sigma_px: float
    residual: float
    converged: bool


def fwhm_profile(profile, spacing: float) -> FwhmResult:
    fit = fit_gaussian(profile)
    value = FWHM_PER_SIGMA * fit.sigma * spacing if fit.converged else math.nan
    return FwhmResult(value, fit.sigma, fit.residual, fit.converged)


def fwhm(wire: WireRoi, image, axis: str, dz: float | None = None,
         dx: float | None = None) -> FwhmResult:
    """FWHM along ``axis`` ('axial' or 'lateral') of the ROI's mean intensity profile."""
    if isinstance(image, BeamformedImage):
        dz = image.dz if dz is None else dz
        dx = image.dx if dx is None else dx
    win = wire.window(_pixels(image))
    if axis == "axial":
        return fwhm_profile(win.mean(axis=1), dz)
    if axis == "lateral":
        return fwhm_profile(win.mean(axis=0), dx)
    raise ValidationError(f"unknown axis {axis!r}")


# -- report ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return str(v)


@dataclass
class MetricReport:
    """Flat rows of ``(section, sample, source, metric, value)`` plus run settings."""

    settings: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def add(self, section: str, sample: str, source: str, values: dict) -> None:
        for k, v in values.items():
            self.rows.append((section, sample, source, k, v))

    def get(self, section: str, sample: str, source: str, metric: str):
        for row in self.rows:
            if row[:4] == (section, sample, source, metric):
                return row[4]
        raise KeyError((section, sample, source, metric))

    def to_text(self) -> str:
        lines = [f"# {k} = {_fmt(v)}" for k, v in self.settings.items()]
        lines.append("section\tsample\tsource\tmetric\tvalue")
        lines.extend("\t".join(_fmt(x) for x in row) for row in self.rows)
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        rep = cls()
        for line in text.splitlines():
            if line.startswith("# ") and " = " in line:
                k, v = line[2:].split(" = ", 1)
                rep.settings[k] = v
            elif line and not line.startswith("section\t"):
                section, sample, source, metric, value = line.split("\t")
                rep.rows.append((section, sample, source, metric, float(value)))
        return rep
