"""Command-line front end: ``pwfk simulate | beamform | train | evaluate``.

Exit codes: 0 success, 2 usage error, 3 data or validation error,
4 numerical failure.  Every command writes a plain-text manifest.
"""

from __future__ import annotations

import argparse
import math
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .core import (LESION_CLASSES, BeamformedImage, ContainerFormatError, DataSample,
                   ValidationError, read_container, write_container)
from .metrics import (MetricReport, RoiPair, disk_ring_roi, fwhm, global_metrics, cr, cnr,
                      gcnr, select_wire_roi)
from .migration import MigrationPlan
from .models import ModelSpec, build_model, load_checkpoint, param_count, save_checkpoint
from .pipeline import beamform, preset, random_phantom, single_angle_image, with_target
from .processing import ProcessingConfig, normalized_to_linear, save_image
from .simulate import (DEFAULT_FRACTIONAL_BANDWIDTH, Lesion, PhantomSpec, make_phantom,
                       simulate_frames)
from .training import NumericalError, TrainConfig, predict, train, train_test_split

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_ALIASES = {"complete": "complete", "pre": "pre_only", "post": "post_only",
                 "pre_only": "pre_only", "post_only": "post_only"}


class UsageError(Exception):
    pass


def write_manifest(path, command: str, values: dict, extra_lines=()) -> None:
    lines = [f"# pwfk {__version__} {command}"]
    lines += [f"{k}: {v}" for k, v in values.items()]
    lines += list(extra_lines)
    Path(path).write_text("\n".join(lines) + "\n")


def _sample_paths(data_dir) -> list:
    paths = sorted(Path(data_dir).glob("sample_*.pwfk"))
    if not paths:
        raise ValidationError(f"no sample_*.pwfk containers in {data_dir}")
    return paths


def _sample_id(path: Path) -> str:
    return path.stem.split("_", 1)[1]


def _plan_for(sample: DataSample, pad_time: int = 0, interp: str = "linear") -> MigrationPlan:
    return MigrationPlan(sample.geometry, sample.params, pad_time=pad_time, interp=interp)


# -- ROI files -----------------------------------------------------------------------------

def write_roi_file(path, lesions=(), wires=()) -> None:
    lines = ["# lesion: x_mm, z_mm, radius_mm    wire: x_mm, z_mm"]
    lines += [f"lesion: {l.x * 1e3!r}, {l.z * 1e3!r}, {l.radius * 1e3!r}" for l in lesions]
    lines += [f"wire: {x * 1e3!r}, {z * 1e3!r}" for x, z in wires]
    Path(path).write_text("\n".join(lines) + "\n")


def read_roi_file(path):
    lesions, wires = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        try:
            vals = [float(v) * 1e-3 for v in value.split(",")]
        except ValueError:
            raise ContainerFormatError(f"line {lineno}: bad numbers", key=key) from None
        if key.strip() == "lesion" and len(vals) == 3:
            lesions.append(tuple(vals))
        elif key.strip() == "wire" and len(vals) == 2:
            wires.append(tuple(vals))
        else:
            raise ContainerFormatError(f"line {lineno}: expected lesion (3 values) or wire (2)",
                                       key=key.strip())
    return lesions, wires


# -- simulate ---------------------------------------------------------------------------------

def default_wires(p) -> tuple:
    zs = np.linspace(p.z_start + 0.15 * p.phantom_depth, p.z_start + 0.85 * p.phantom_depth, 4)
    return tuple((0.0, float(z)) for z in zs)


def cmd_simulate(args) -> int:
    p = preset(args.preset, args.angles, args.angle_span)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = MigrationPlan(p.geometry, p.acquisition)
    cfg = ProcessingConfig(dynamic_range=args.dynamic_range)
    rng = np.random.default_rng(args.seed)
    written = []
    for n in range(args.num_samples):
        sample_seed = int(rng.integers(2 ** 31))
        if args.phantom == "speckle_lesions":
            cls = LESION_CLASSES[n % len(LESION_CLASSES)]
            spec = random_phantom(p, cls, sample_seed)
        elif args.phantom == "cyst":
            r = 0.2 * min(p.phantom_width, p.phantom_depth)
            lesion = Lesion(0.0, p.z_start + p.phantom_depth / 2, r, args.contrast_db)
            cls = "hypoechoic" if args.contrast_db < 0 else "hyperechoic" if args.contrast_db > 0 else "normal"
            spec = PhantomSpec("cyst", p.phantom_width, p.phantom_depth, p.z_start, p.density,
                               (lesion,), (), sample_seed)
        else:
            cls = "normal"
            spec = PhantomSpec("wires", p.phantom_width, p.phantom_depth, p.z_start, 0.0,
                               (), default_wires(p), sample_seed)
        frames = simulate_frames(make_phantom(spec), p.geometry, p.acquisition)
        sample = with_target(p.geometry, p.acquisition, frames, cls, plan, cfg)
        path = out / f"sample_{n:03d}.pwfk"
        write_container(sample, path)
        write_roi_file(out / f"sample_{n:03d}.roi.txt", spec.lesions, spec.wire_positions)
        written.append(path.name)
    write_manifest(out / "simulate_manifest.txt", "simulate", {
        "phantom": args.phantom, "preset": args.preset, "num_samples": args.num_samples,
        "angles": args.angles, "angle_span_deg": args.angle_span, "seed": args.seed,
        "contrast_db": args.contrast_db, "dynamic_range_db": args.dynamic_range,
        "density_per_mm2": 0.0 if args.phantom == "wires" else p.density,
        "fractional_bandwidth": DEFAULT_FRACTIONAL_BANDWIDTH,
        "num_elements": p.geometry.num_elements, "pitch_m": repr(p.geometry.pitch),
        "center_freq_hz": repr(p.acquisition.center_freq),
        "sampling_freq_hz": repr(p.acquisition.sampling_freq),
        "num_time_samples": p.acquisition.num_samples,
    }, [f"file: {w}" for w in written])
    print(f"wrote {len(written)} samples to {out}")
    return EXIT_OK


# -- beamform ------------------------------------------------------------------------------------

def cmd_beamform(args) -> int:
    sample = read_container(args.inp)
    plan = _plan_for(sample, args.pad_time, args.interp)
    cfg = ProcessingConfig(dynamic_range=args.dynamic_range)
    if args.angles == "single":
        frames = [sample.frame_at(0.0)]
    else:
        frames = sorted(sample.frames, key=lambda f: f.angle_index)
    img = beamform(frames, plan, cfg)
    save_image(img, args.out)
    write_manifest(str(args.out) + ".manifest.txt", "beamform", {
        "in": args.inp, "angles": args.angles, "num_frames": len(frames), "out": args.out,
        "dynamic_range_db": args.dynamic_range, "pad_time": plan.pad_time,
        "pad_lateral": plan.pad_lateral, "interp": plan.interp,
    })
    print(f"wrote {args.out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------------------

def _load_dataset(data_dir):
    paths = _sample_paths(data_dir)
    samples = {_sample_id(p): read_container(p) for p in paths}
    first = next(iter(samples.values()))
    for sid, s in samples.items():
        if s.geometry != first.geometry or s.params != first.params:
            raise ValidationError(f"sample {sid} uses a different probe or acquisition")
    return samples


def cmd_train(args) -> int:
    if not 0 < args.fraction <= 1:
        raise UsageError("--fraction must lie in (0, 1]")
    samples = _load_dataset(args.data)
    ids = list(samples)
    labels = [samples[i].lesion_class for i in ids]
    num_test = args.num_test if args.num_test is not None else int(math.floor(0.2 * len(ids) + 0.5))
    if len(ids) - num_test < 1:
        raise ValidationError("not enough samples left for training")
    train_ids, test_ids = train_test_split(ids, labels, num_test)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, fraction=args.fraction, seed=args.seed)
    spec = ModelSpec(MODEL_ALIASES[args.model], args.channels, args.kernel, args.blocks,
                     args.convs, args.groups)
    first = samples[ids[0]]
    plan = _plan_for(first)
    pcfg = ProcessingConfig(dynamic_range=first.target.dynamic_range if first.target else 60.0)
    model = build_model(spec, plan, pcfg, seed=args.seed)

    def progress(epoch, loss):
        if not args.quiet:
            print(f"epoch {epoch:4d}  loss {loss:.6g}", flush=True)

    run = train(model, samples, cfg, train_ids, progress)
    extra = {"test_ids": ",".join(test_ids), "train_ids": ",".join(run.subset)}
    save_checkpoint(args.out, model, epoch=cfg.epochs, optimizer_step=run.optimizer.step, extra=extra)
    manifest = run.manifest({
        "model": spec.variant, "channels": spec.channels, "kernel": spec.kernel,
        "blocks_per_resnet": spec.blocks_per_resnet, "convs_per_resnet": spec.convs_per_resnet,
        "groups": spec.groups, "param_count": param_count(model), "data": args.data,
        "num_samples": len(ids), "test_ids": ", ".join(test_ids), "threads": args.threads,
        "deterministic": args.deterministic, "checkpoint": args.out,
    })
    Path(str(args.out) + ".manifest.txt").write_text(manifest)
    if args.figures:
        from .plotting import loss_curve

        loss_curve(run.history, str(args.out) + ".loss.png")
    print(f"trained on {len(run.subset)} samples; final loss {run.history[-1]:.6g}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------------------------------

def local_metrics(roi: RoiPair, img, dynamic_range: float) -> dict:
    lin = normalized_to_linear(img.pixels, dynamic_range)
    out = {"cr_db": cr(roi, lin), "cnr_db": cnr(roi, lin), "gcnr": gcnr(roi, lin)}
    out.update({"cnr_db_log": cnr(roi, img.pixels), "gcnr_log": gcnr(roi, img.pixels)})
    return out


def wire_metrics(img, x: float, z: float, dynamic_range: float) -> dict:
    nz, nx = img.shape
    iz = int(round(z / img.dz))
    ix = int(round(x / img.dx + (nx - 1) / 2.0))
    half = (max(3, int(round(0.75e-3 / img.dz))), max(3, int(round(1.5e-3 / img.dx))))
    lin = normalized_to_linear(img.pixels, dynamic_range)
    # centre the window on the brightest pixel near the nominal position
    win = lin[max(iz - half[0], 0):iz + half[0] + 1, max(ix - half[1], 0):ix + half[1] + 1]
    dz, dx = np.unravel_index(np.argmax(win), win.shape)
    center = (max(iz - half[0], 0) + dz, max(ix - half[1], 0) + dx)
    roi = select_wire_roi(lin, center, half)
    ax = fwhm(roi, lin, "axial", img.dz, img.dx)
    lat = fwhm(roi, lin, "lateral", img.dz, img.dx)
    return {"fwhm_axial_mm": ax.fwhm * 1e3, "fwhm_lateral_mm": lat.fwhm * 1e3,
            "fit_converged": float(ax.converged and lat.converged)}


def cmd_evaluate(args) -> int:
    samples = _load_dataset(args.data)
    first = next(iter(samples.values()))
    plan = _plan_for(first)
    model, header = load_checkpoint(args.ckpt, plan)
    dr = model.cfg.dynamic_range
    test_ids = [i for i in header.get("test_ids", "").split(",") if i]
    if args.all or not test_ids:
        test_ids = list(samples)
    missing = [i for i in test_ids if i not in samples]
    if missing:
        raise ValidationError(f"test samples {missing} are not in {args.data}")
    shared_roi = read_roi_file(args.roi) if args.roi else None
    fig_dir = Path(args.figures) if args.figures else None
    if fig_dir:
        fig_dir.mkdir(parents=True, exist_ok=True)

    report = MetricReport(settings={
        "checkpoint": args.ckpt, "data": args.data, "model": model.spec.variant,
        "dynamic_range_db": dr, "local_scale": "linear envelope (cr_db, cnr_db, gcnr); "
        "log/normalized (cnr_db_log, gcnr_log)", "num_test": len(test_ids),
    })
    for sid in test_ids:
        s = samples[sid]
        if s.target is None:
            raise ValidationError(f"sample {sid} has no target")
        out = BeamformedImage(predict(model, s), plan.dz, plan.dx, "normalized", dr)
        if not out.same_grid(s.target):
            raise ValidationError(f"model output grid {out.shape} does not match target {s.target.shape}")
        base = single_angle_image(s, plan, ProcessingConfig(dynamic_range=dr))
        images = {"model": out, "baseline": base, "target": s.target}
        report.add("global", sid, "model", global_metrics(out.pixels, s.target.pixels))
        report.add("global", sid, "baseline", global_metrics(base.pixels, s.target.pixels))

        roi_path = Path(args.data) / f"sample_{sid}.roi.txt"
        lesions, wires = shared_roi if shared_roi else (
            read_roi_file(roi_path) if roi_path.exists() else ([], []))
        rois = []
        for k, (x, z, r) in enumerate(lesions):
            roi = disk_ring_roi(out.shape, plan.dz, plan.dx, (x, z), r)
            rois.append(roi)
            for name, img in images.items():
                report.add(f"lesion{k}", sid, name, local_metrics(roi, img, dr))
        for k, (x, z) in enumerate(wires):
            for name, img in images.items():
                try:
                    vals = wire_metrics(img, x, z, dr)
                except ValidationError:
                    vals = {"fwhm_axial_mm": math.nan, "fwhm_lateral_mm": math.nan,
                            "fit_converged": 0.0}
                report.add(f"wire{k}", sid, name, vals)
        if fig_dir:
            from .plotting import bmode_panels

            bmode_panels({"single angle": base, "model": out, "target": s.target},
                         fig_dir / f"sample_{sid}.png", rois)
    report.write(args.report)
    print(f"wrote {args.report} ({len(report.rows)} rows)")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pwfk", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None, help="BLAS/FFT thread limit")
    ap.add_argument("--deterministic", action="store_true",
                    help="single-threaded reductions for bit-identical reruns")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate RF containers with compounded targets")
    s.add_argument("--phantom", choices=("speckle_lesions", "cyst", "wires"), default="speckle_lesions")
    s.add_argument("--out", required=True)
    s.add_argument("--num-samples", type=int, default=1)
    s.add_argument("--angles", type=int, default=75)
    s.add_argument("--angle-span", type=float, default=16.0, help="half span in degrees")
    s.add_argument("--preset", choices=("full", "desk"), default="full")
    s.add_argument("--contrast-db", type=float, default=-6.0, help="cyst contrast")
    s.add_argument("--dynamic-range", type=float, default=60.0)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("beamform", help="migrate a container to a B-mode image")
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--angles", choices=("single", "all"), default="all")
    b.add_argument("--out", required=True)
    b.add_argument("--dynamic-range", type=float, default=60.0)
    b.add_argument("--pad-time", type=int, default=0)
    b.add_argument("--interp", choices=("linear", "spline"), default="linear")
    b.set_defaults(func=cmd_beamform)

    t = sub.add_parser("train", help="train a model on a directory of containers")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=tuple(MODEL_ALIASES), default="complete")
    t.add_argument("--fraction", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--lr", type=float, default=TrainConfig.lr)
    t.add_argument("--out", required=True)
    t.add_argument("--num-test", type=int, default=None)
    t.add_argument("--channels", type=int, default=64)
    t.add_argument("--kernel", type=int, default=5)
    t.add_argument("--blocks", type=int, default=3)
    t.add_argument("--convs", type=int, default=16)
    t.add_argument("--groups", type=int, default=8)
    t.add_argument("--figures", action="store_true", help="also write a loss-curve PNG")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint against compounded targets")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--roi", default=None, help="ROI file shared by all samples")
    e.add_argument("--report", required=True)
    e.add_argument("--figures", default=None, help="directory for B-mode panels")
    e.add_argument("--all", action="store_true", help="score every sample, not just the test ids")
    e.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    limit = 1 if args.deterministic else args.threads
    if limit is not None and limit < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if limit is not None:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=limit)
    else:
        ctx = nullcontext()
    try:
        with ctx:
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
