"""Figures for reports: B-mode panels, training curves and wire profiles.

Everything renders off-screen to files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import BeamformedImage  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _extent_mm(img: BeamformedImage):
    nz, nx = img.shape
    half = (nx - 1) / 2.0 * img.dx
    return [-half * 1e3, half * 1e3, (nz - 1) * img.dz * 1e3, 0.0]


def show_bmode(ax, img: BeamformedImage, title: str = "", dynamic_range: float | None = None):
    """Draw a normalized image on ``ax`` in physical units; returns the AxesImage."""
    dr = dynamic_range or img.dynamic_range or 60.0
    handle = ax.imshow(img.pixels * dr - dr, cmap="gray", vmin=-dr, vmax=0.0,
                       extent=_extent_mm(img), aspect="equal", interpolation="nearest")
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("z [mm]")
    if title:
        ax.set_title(title)
    return handle


def bmode_panels(images: dict, path, rois=()) -> None:
    """One panel per ``{title: image}`` with a shared dB colour bar; ROI circles optional."""
    with plt.rc_context(STYLE):
        n = len(images)
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n + 0.6, 3.4), squeeze=False)
        handle = None
        for ax, (title, img) in zip(axes[0], images.items()):
            handle = show_bmode(ax, img, title)
            for roi in rois:
                x, z = roi.center
                for r, style in zip(roi.radii, ("-", "--", "--")):
                    ax.add_patch(plt.Circle((x * 1e3, z * 1e3), r * 1e3, fill=False,
                                            color="tab:orange", ls=style, lw=0.8))
        if handle is not None:
            fig.colorbar(handle, ax=axes[0].tolist(), label="dB", shrink=0.8)
        fig.savefig(path)
        plt.close(fig)


def loss_curve(history, path, label: str = "training loss") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        epochs = np.arange(1, len(history) + 1)
        ax.semilogy(epochs, history, marker="o", ms=2.5, lw=1.0, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def wire_profiles(profiles: dict, spacing: float, path, axis: str = "lateral") -> None:
    """Overlay 1-D intensity profiles ``{label: array}`` through a wire target."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for label, prof in profiles.items():
            prof = np.asarray(prof, dtype=np.float64)
            u = (np.arange(prof.size) - (prof.size - 1) / 2.0) * spacing * 1e3
            ax.plot(u, prof / prof.max() if prof.max() > 0 else prof, lw=1.0, label=label)
        ax.set_xlabel(f"{axis} offset [mm]")
        ax.set_ylabel("normalized intensity")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
