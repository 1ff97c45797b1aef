"""Acceptance suite: one PASS/FAIL line per criterion, echoed in the pytest summary.

Run ``pytest tests/test_acceptance.py -v`` (the long-running criteria are marked
``slow`` and still run by default).  Each test records its measured values
before asserting, so a failing criterion still reports what was observed.
"""

import math
import time

import numpy as np
import pytest

from conftest import central_diff, record, rel_err
from pwfk.core import AcquisitionParams, LESION_CLASSES, ProbeGeometry, steering_angles
from pwfk.layers import (Activation, Conv2dWS, GroupNorm)
from pwfk.metrics import (FWHM_PER_SIGMA, cnr, cr, disk_ring_roi, fwhm_profile, gcnr, gcnr_values,
                          l1, l2, ncc, psnr, RoiPair)
from pwfk.migration import MigrationPlan, compound, migrate, migrate_adjoint, migrate_array
from pwfk.models import ModelSpec, ResNet, build_model, param_count, save_checkpoint
from pwfk.pipeline import preset, random_phantom, simulate_sample, single_angle_image
from pwfk.processing import (envelope_backward, envelope_forward, log_compress_backward,
                             log_compress_forward, to_unit_range_backward, to_unit_range_forward)
from pwfk.simulate import Lesion, PhantomSpec, Scatterer, make_phantom, simulate_frames, simulate_rf
from pwfk.training import TrainConfig, mse_loss, predict, select_subset, train, train_test_split

TINY = dict(channels=8, convs_per_resnet=8)


# -- 1: adjoint ----------------------------------------------------------------------------

def test_criterion_01_adjoint():
    t = time.time()
    rng = np.random.default_rng(11)
    geom = ProbeGeometry(24, 0.2e-3)
    plans = [
        (MigrationPlan(geom, AcquisitionParams(num_samples=200, angles=(0.0,))), 0.0),
        (MigrationPlan(geom, AcquisitionParams(num_samples=160, t0=1e-6, angles=(0.2,)),
                       interp="spline"), 0.2),
        (MigrationPlan(ProbeGeometry(17, 0.3e-3),
                       AcquisitionParams(num_samples=128, angles=(-math.radians(16),)),
                       pad_time=512, pad_lateral=50), -math.radians(16)),
    ]
    worst = 0.0
    for plan, angle in plans:
        for _ in range(20):
            x = rng.standard_normal(plan.data_shape)
            y = rng.standard_normal(plan.image_shape)
            ax = migrate_array(x, plan, angle)
            gap = abs(np.vdot(ax, y) - np.vdot(x, migrate_adjoint(y, plan, angle)))
            worst = max(worst, gap / (np.linalg.norm(ax) * np.linalg.norm(y)))
    elapsed = time.time() - t
    ok = record(1, worst <= 1e-6 and elapsed <= 30,
                f"adjoint gap {worst:.2e} <= 1e-6 over 60 pairs, {elapsed:.1f} s <= 30 s")
    assert ok


# -- 2: point-scatterer localization ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_02_point_localization():
    t = time.time()
    geom = ProbeGeometry()
    angles = tuple(np.radians([-16.0, 0.0, 16.0]))
    acq = AcquisitionParams(num_samples=2048, angles=angles)
    plan = MigrationPlan(geom, acq)
    rows, ok = [], True
    for z in (10e-3, 20e-3, 30e-3):
        for a in angles:
            img = migrate(simulate_rf([Scatterer(0.0, z)], geom, acq, a), plan)
            env, _ = envelope_forward(img.pixels)
            iz, ix = np.unravel_index(np.argmax(env), env.shape)
            err = math.hypot(iz * plan.dz - z, geom.element_positions[ix])
            tol = 0.4e-3 if a == 0 else 0.6e-3
            ok &= err <= tol
            rows.append(f"{z * 1e3:.0f}mm/{math.degrees(a):+.0f}deg {err * 1e3:.3f}")
    elapsed = time.time() - t
    ok &= elapsed <= 120
    assert record(2, ok, "peak error mm " + ", ".join(rows) + f"; {elapsed:.0f} s")


# -- 3: compounding benefit -----------------------------------------------------------------

def _cyst_images(num_elements, pitch, radius, z_c, contrast_db, density, depth=None,
                 z_start=None, pad_time=0, seed=1):
    geom = ProbeGeometry(num_elements, pitch)
    acq = AcquisitionParams(num_samples=1024, angles=steering_angles(75))
    depth = 2 * (2 * radius + 1e-3) if depth is None else depth
    z_start = z_c - depth / 2 if z_start is None else z_start
    spec = PhantomSpec("cyst", num_elements * pitch, depth, z_start, density,
                       (Lesion(0.0, z_c, radius, contrast_db),), (), seed)
    frames = simulate_frames(make_phantom(spec), geom, acq)
    plan = MigrationPlan(geom, acq, pad_time=pad_time)
    images = [migrate(f, plan) for f in frames]
    single = envelope_forward(images[len(images) // 2].pixels)[0]
    comp = envelope_forward(compound(images).pixels)[0]
    roi = disk_ring_roi(plan.image_shape, plan.dz, plan.dx, (0.0, z_c), radius)
    return roi, single, comp


@pytest.mark.slow
def test_criterion_03_compounding_benefit():
    t = time.time()
    roi, single, comp = _cyst_images(128, ProbeGeometry().pitch, 2e-3, 12e-3, -6.0, 50.0)
    s = (cnr(roi, single), gcnr(roi, single))
    c = (cnr(roi, comp), gcnr(roi, comp))
    elapsed = time.time() - t
    ok = c[0] > s[0] and c[1] > s[1] and elapsed <= 300
    assert record(3, ok, f"CNR {c[0]:.2f} dB > {s[0]:.2f} dB, gCNR {c[1]:.3f} > {s[1]:.3f}; "
                         f"{elapsed:.0f} s")


# -- 4: gradient checks ---------------------------------------------------------------------

def _check(forward, backward, x, params=()):
    """Largest relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(5)
    w = rng.standard_normal(np.shape(forward()))
    f = lambda: float(np.sum(w * forward()))  # noqa: E731
    forward()
    grads = backward(w)
    errs = [rel_err(grads[0], central_diff(f, x))]
    errs += [rel_err(g, central_diff(f, p)) for g, p in zip(grads[1:], params)]
    return max(errs)


def test_criterion_04_gradients():
    t = time.time()
    rng = np.random.default_rng(4)
    errs = {}

    conv = Conv2dWS(2, 3, 3, rng)
    conv.params["bias"][:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 7, 6))
    errs["conv+ws"] = _check(lambda: conv.forward(x),
                             lambda g: (conv.backward(g), conv.grads["weight"], conv.grads["bias"]),
                             x, (conv.params["weight"], conv.params["bias"]))
    conv.zero_grad()

    gn = GroupNorm(4, 2)
    gn.params["gamma"][:] = rng.standard_normal(4)
    gn.params["beta"][:] = rng.standard_normal(4)
    x = rng.standard_normal((4, 5, 6))

    def gn_back(g):
        gn.zero_grad()
        return gn.backward(g), gn.grads["gamma"], gn.grads["beta"]

    errs["groupnorm"] = _check(lambda: gn.forward(x), gn_back, x,
                               (gn.params["gamma"], gn.params["beta"]))

    for kind in ("relu", "tanh", "sigmoid"):
        act = Activation(kind)
        x = rng.standard_normal((2, 5, 5))
        x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
        errs[kind] = _check(lambda: act.forward(x), lambda g: (act.backward(g),), x)

    cols = rng.standard_normal((32, 6))
    errs["envelope"] = _check(lambda: envelope_forward(cols)[0],
                              lambda g: (envelope_backward(g, envelope_forward(cols)[1]),), cols)

    e = rng.uniform(0.05, 1.0, (16, 5))
    e[0, 0] = 2.0  # fixed maximum, away from the perturbed pixels' range

    def log_fwd():
        return log_compress_forward(e)[0]

    def log_back(g):
        return (log_compress_backward(g, log_compress_forward(e)[1]),)

    # the backward pass holds the image maximum constant, so the oracle skips that pixel
    w = np.random.default_rng(5).standard_normal(e.shape)
    f = lambda: float(np.sum(w * log_fwd()))  # noqa: E731
    fd = central_diff(f, e)
    mask = np.ones(e.shape, bool)
    mask[0, 0] = False
    errs["log-compress"] = rel_err(log_back(w)[0][mask], fd[mask])

    u = rng.uniform(-60, 0, (6, 4))
    errs["unit-range"] = _check(lambda: to_unit_range_forward(u)[0],
                                lambda g: (to_unit_range_backward(g),), u)

    a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    g_mse = mse_loss(a, b)[1]
    errs["mse"] = rel_err(g_mse, central_diff(lambda: mse_loss(a, b)[0], a))

    net = ResNet(4, 3, 1, 4, 2, "sigmoid", rng=rng)
    x = rng.standard_normal((1, 8, 8))
    layers = [l for _, l in net.named_layers()]
    for l in layers:
        l.zero_grad()
    ps = [l.params[k] for l in layers for k in l.params]
    errs["tiny resnet"] = _check(lambda: net.forward(x),
                                 lambda g: (net.backward(g),
                                            *[l.grads[k] for l in layers for k in l.params]),
                                 x, ps)

    elapsed = time.time() - t
    ok = all(v <= 1e-4 for k, v in errs.items() if k != "tiny resnet")
    ok = ok and errs["tiny resnet"] <= 1e-3 and elapsed <= 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert record(4, ok, f"rel err {detail}; {elapsed:.1f} s")


# -- 5: parameter parity ---------------------------------------------------------------------

def test_criterion_05_parameter_parity():
    counts = {v: param_count(ModelSpec(variant=v)) for v in ("complete", "pre_only", "post_only")}
    geom = ProbeGeometry(16, 0.3e-3)
    acq = AcquisitionParams(sampling_freq=10e6, center_freq=2.5e6, num_samples=64, angles=(0.0,))
    plan = MigrationPlan(geom, acq)
    built = {v: param_count(build_model(ModelSpec(variant=v), plan))
             for v in ("complete", "pre_only", "post_only")}
    ok = len(set(counts.values()) | set(built.values())) == 1
    assert record(5, ok, "default parameter counts " + ", ".join(f"{k} {v}" for k, v in built.items()))


# -- 6: overfit smoke test ---------------------------------------------------------------------

def _desk_samples(n, first_seed):
    p = preset("desk")
    plan = MigrationPlan(p.geometry, p.acquisition)
    samples = {}
    for i in range(n):
        cls = LESION_CLASSES[i % len(LESION_CLASSES)]
        samples[f"{i:03d}"] = simulate_sample(random_phantom(p, cls, first_seed + i), p, cls, plan)
    return plan, samples


@pytest.mark.slow
def test_criterion_06_overfit(tmp_path):
    t = time.time()
    plan, samples = _desk_samples(2, 200)
    cfg = TrainConfig(epochs=200, lr=0.01)
    runs, blobs = [], []
    for r in range(2):
        model = build_model(ModelSpec(**TINY), plan, seed=0)
        runs.append(train(model, samples, cfg))
        save_checkpoint(tmp_path / f"{r}.ckpt", model, epoch=cfg.epochs)
        blobs.append((tmp_path / f"{r}.ckpt").read_bytes())
    h = runs[0].history
    same = blobs[0] == blobs[1] and runs[0].history == runs[1].history
    elapsed = time.time() - t
    ok = h[-1] <= 0.1 * h[0] and same and elapsed <= 600
    assert record(6, ok, f"final MSE {h[-1]:.4g} <= 0.1 x epoch-1 {h[0]:.4g}, "
                         f"identical re-run {same}; {elapsed:.0f} s")


# -- 7: small-data claim ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_small_data():
    t = time.time()
    plan, samples = _desk_samples(10, 100)
    ids = list(samples)
    train_ids, test_ids = train_test_split(ids, [samples[i].lesion_class for i in ids], 3)
    model = build_model(ModelSpec(**TINY), plan, seed=0)
    train(model, samples, TrainConfig(), train_ids)
    m = {k: [] for k in ("model", "single")}
    for i in test_ids:
        y = samples[i].target.pixels
        for name, x in (("model", predict(model, samples[i])),
                        ("single", single_angle_image(samples[i], plan).pixels)):
            m[name].append((l1(x, y), l2(x, y), psnr(x, y), ncc(x, y)))
    mm, ms = np.mean(m["model"], axis=0), np.mean(m["single"], axis=0)
    better = [mm[0] < ms[0], mm[1] < ms[1], mm[2] > ms[2], mm[3] > ms[3]]
    elapsed = time.time() - t
    ok = all(better) and elapsed <= 1200
    names = ("l1", "l2", "psnr", "ncc")
    detail = ", ".join(f"{n} {a:.4g} vs {b:.4g}" for n, a, b in zip(names, mm, ms))
    assert record(7, ok, f"model vs single on {len(test_ids)} held-out samples: {detail}; "
                         f"{elapsed:.0f} s")


# -- 8: metric unit values -----------------------------------------------------------------------

def test_criterion_08_metric_values():
    x4, y4 = np.array([0.0, 1.0, 1.0, 0.0]), np.array([1.0, 1.0, 0.0, 0.0])
    y = np.zeros(100)
    y[0] = 1.0
    rng = np.random.default_rng(8)
    v = rng.random(40)
    region = np.zeros(100, bool)
    region[:40] = True
    roi = RoiPair(region, ~region)
    flat = np.full(100, 2.0)
    tenth = flat.copy()
    tenth[:40] = 0.2
    checks = {
        "l1 identity": l1(v, v) == 0,
        "l2 identity": l2(v, v) == 0,
        "l1 example": l1(x4, y4) == 0.5,
        "l2 example": abs(l2(x4, y4) - math.sqrt(0.5)) <= 1e-12,
        "psnr 20 dB": abs(psnr(y + 0.1, y) - 20.0) <= 1e-9,
        "psnr inf": psnr(y, y) == math.inf,
        "psnr scale": abs(psnr(3 * v, 3 * v[::-1]) - psnr(v, v[::-1])) <= 1e-9,
        "ncc self": abs(ncc(v, v) - 1) <= 1e-12,
        "ncc affine": abs(ncc(v, 2 * v + 1) - 1) <= 1e-12 and abs(ncc(v, -v + 1) + 1) <= 1e-12,
        "ncc example": abs(ncc(x4, y4)) <= 1e-15,
        "ncc constant": math.isnan(ncc(np.ones(4), y4)),
        "cr 0 dB": cr(roi, flat) == 0.0,
        "cr -20 dB": abs(cr(roi, tenth) + 20.0) <= 1e-12,
        "cnr equal means": cnr(roi, np.concatenate([np.tile([0.0, 2.0], 20), np.ones(60)])) == -math.inf,
        "gcnr identical": gcnr_values(v, v.copy()) == 0.0,
        "gcnr disjoint": gcnr_values(rng.uniform(0, 0.4, 50), rng.uniform(0.6, 1.0, 50)) == 1.0,
    }
    failed = [k for k, good in checks.items() if not good]
    assert record(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} metric examples"
                                 + (f"; failed {failed}" if failed else ""))


# -- 9: FWHM exactness -----------------------------------------------------------------------------

def test_criterion_09_fwhm():
    errs = []
    u = np.arange(41.0)
    for sigma in (1.5, 2.0, 4.0):
        prof = 0.1 + np.exp(-0.5 * ((u - 20.3) / sigma) ** 2)
        expected = FWHM_PER_SIGMA * sigma * 0.1e-3
        errs.append(abs(fwhm_profile(prof, 0.1e-3).fwhm - expected) / expected)
    ok = max(errs) <= 1e-3
    assert record(9, ok, "relative FWHM error " + ", ".join(
        f"sigma {s} {e:.1e}" for s, e in zip((1.5, 2.0, 4.0), errs)) + " <= 1e-3")


# -- 10: contrast target -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_contrast_target():
    t = time.time()
    roi, single, comp = _cyst_images(128, 0.1e-3, 3e-3, 12e-3, -30.0, 20.0, depth=16e-3,
                                     z_start=4e-3, pad_time=2048)
    c, s = cr(roi, comp), cr(roi, single)
    elapsed = time.time() - t
    ok = abs(c + 30.0) <= 4.0 and s > c
    assert record(10, ok, f"compound CR {c:.2f} dB within 4 dB of -30, single {s:.2f} dB "
                          f"less negative; {elapsed:.0f} s")


# -- 11: protocol pinning -----------------------------------------------------------------------------

def test_criterion_11_protocol():
    text = TrainConfig().to_text()
    pinned = all(s in text for s in ("epochs: 70", "lr: 0.01", "betas: 0.9, 0.999", "batch_size: 1"))
    ids = [f"s{i:03d}" for i in range(176)]
    labels = [LESION_CLASSES[i % 4] for i in range(176)]
    small = select_subset(ids, labels, 0.04, 0)
    nested = all(set(select_subset(ids, labels, 0.04, s)) <= set(select_subset(ids, labels, 0.06, s))
                 for s in range(50))
    counts = [sum(labels[ids.index(i)] == c for i in small) for c in LESION_CLASSES]
    ok = pinned and len(small) == 7 and nested and max(counts) - min(counts) <= 1
    assert record(11, ok, f"defaults pinned {pinned}, {len(small)} ids at 0.04 of 176, "
                          f"nested over 50 seeds {nested}, class counts {counts}")
