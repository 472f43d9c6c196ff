"""Command-line front end: ``usnav <subcommand> ...``.

Every subcommand reads and writes the formats of :mod:`usnav.fileio` and
calls the library directly, so results equal the in-process API. A JSON
run report goes to ``--report`` whenever it is given, also on failure.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 non-convergence
or degenerate geometry.
"""
from __future__ import annotations

import argparse
import functools
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import fileio as fio
from .camera import DegenerateGeometryError, projection_error_stats, triangulate
from .compound import EmptyInputError, compound, stick_hole_fill
from .defreg import DemonsConfig, field_stats, init_translation, register_demons
from .evaluate import centerline_distance, compute_tre
from .geometry import Frame, RigidTransform, SingularTransformError, invert
from .mvreg import LC2Config, OptimizerOptions, register_affine_lc2
from .phantom import (
    CoverageError,
    ErrorBudget,
    compound_spacing,
    evaluate_detections,
    gen_multimodal_pair,
    gen_smooth_deformation,
    gen_waterbath_session,
    predict_pixels,
    segment_blobs,
    warp_volume,
)
from .pointreg import (
    DegenerateConfigurationError,
    IllConditionedError,
    PivotPoses,
    UndefinedCorrelationError,
    fit_rigid,
    fit_similarity,
    pivot_calibrate,
    temporal_align,
)

log = logging.getLogger("usnav")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_NUMERIC_ERRORS = (
    DegenerateConfigurationError,
    IllConditionedError,
    DegenerateGeometryError,
    SingularTransformError,
    UndefinedCorrelationError,
)


class NotConverged(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _frame(name: str) -> Frame:
    try:
        return Frame(name)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown frame {name!r}; one of {[f.value for f in Frame]}")


def _load_chain(specs: list[str], report: fio.RunReport):
    """``a.txt inv:b.txt ...`` -> a @ inv(b) @ ...; the last entry acts first."""
    ts = []
    for spec in specs:
        inv = spec.startswith("inv:")
        path = spec[4:] if inv else spec
        report.add_input(path)
        T = fio.read_transform(path)
        ts.append(invert(T) if inv else T)
    return functools.reduce(lambda a, b: a @ b, ts)


# --- subcommands -------------------------------------------------------------


def cmd_calibrate_rigid(a, rep):
    rep.add_input(a.pairs)
    pairs = fio.read_pairs(a.pairs, a.source, a.target)
    T, fit = fit_rigid(pairs)
    fio.write_transform(T, a.out)
    rep.add_output(a.out)
    rep.metrics.update(rms_residual=fit.rms_residual, residuals=fit.residuals,
                       reflection_corrected=fit.reflection_corrected, n=len(pairs))


def cmd_calibrate_similarity(a, rep):
    rep.add_input(a.pairs)
    pairs = fio.read_pairs(a.pairs, a.source, a.target)
    T, fit = fit_similarity(pairs, isotropic=not a.anisotropic)
    fio.write_transform(T, a.out)
    rep.add_output(a.out)
    rep.metrics.update(rms_residual=fit.rms_residual, residuals=fit.residuals, scale=T.scale,
                       iterations=fit.iterations, n=len(pairs))
    rep.converged = fit.converged
    if not fit.converged:
        raise NotConverged("per-axis similarity fit did not converge")


def cmd_calibrate_pivot(a, rep):
    rep.add_input(a.poses)
    poses = PivotPoses(fio.read_pose_list(a.poses))
    res = pivot_calibrate(poses)
    out = {"tip_offset": res.tip_offset, "pivot_point": res.pivot_point, "rms": res.rms}
    fio.write_json(out, a.out)
    rep.add_output(a.out)
    rep.metrics.update(out, residuals=res.residuals, angular_range_deg=poses.angular_range_deg())


def cmd_temporal_align(a, rep):
    rep.add_input(a.a)
    rep.add_input(a.b)
    res = temporal_align(fio.read_timeseries(a.a), fio.read_timeseries(a.b), a.max_lag)
    rep.metrics.update(lag=res.lag, peak_ncc=res.peak_ncc, grid_step=res.grid_step)
    if a.out:
        fio.write_json(rep.metrics, a.out)
        rep.add_output(a.out)


def cmd_compound(a, rep):
    rep.add_input(a.sequence)
    rep.add_input(a.calibration)
    seq = fio.read_sequence(a.sequence)
    probe_T_us = fio.read_transform(a.calibration)
    spacing = a.spacing if a.spacing is not None else compound_spacing(probe_T_us)
    vol, info = compound(seq, probe_T_us, spacing)
    if a.fill:
        vol = stick_hole_fill(vol, a.stick_length)
    fio.write_volume(vol, a.out)
    rep.add_output(a.out)
    rep.metrics.update(frames_used=info.frames_used, frames_skipped=info.frames_skipped,
                       voxels_filled=int(vol.filled.sum()), dims=vol.dims, spacing=vol.spacing)


def cmd_fill_holes(a, rep):
    rep.add_input(a.volume)
    vol = fio.read_volume(a.volume)
    before = int(vol.filled.sum())
    out = stick_hole_fill(vol, a.stick_length)
    fio.write_volume(out, a.out)
    rep.add_output(a.out)
    rep.metrics.update(filled_before=before, filled_after=int(out.filled.sum()), stick_length=a.stick_length)


def cmd_project(a, rep):
    rep.add_input(a.rig)
    rig = fio.read_rig(a.rig)
    ecm_T_x = _load_chain(a.chain, rep)
    if a.volume:
        rep.add_input(a.volume)
        pts = segment_blobs(fio.read_volume(a.volume), a.count, a.threshold)
    else:
        rep.add_input(a.points)
        pts = fio.read_points(a.points)
    # Same call path as the library: dv_T_ecm = identity, dv_T_ot = the chain.
    ident = RigidTransform.identity(ecm_T_x.target, ecm_T_x.target)
    pl, pr = predict_pixels(pts, ident, ecm_T_x, rig)
    if a.labels_left and a.labels_right:
        rep.add_input(a.labels_left)
        rep.add_input(a.labels_right)
        res = evaluate_detections(pts, ident, ecm_T_x, rig,
                                  fio.read_pixels(a.labels_left), fio.read_pixels(a.labels_right))
        pl, pr = res.predicted_left, res.predicted_right
        rep.metrics.update(res.summary())
    rep.metrics["n"] = len(pts)
    for px, path in ((pl, a.out_left), (pr, a.out_right)):
        if path:
            fio.write_pixels(px, path)
            rep.add_output(path)


def cmd_triangulate(a, rep):
    for p in (a.rig, a.left, a.right):
        rep.add_input(p)
    rig = fio.read_rig(a.rig)
    tri = triangulate(rig, fio.read_pixels(a.left), fio.read_pixels(a.right))
    rep.metrics.update(reprojection_rms=tri.reprojection_rms, n=len(tri.points))
    if a.reference_left and a.reference_right:
        rep.add_input(a.reference_left)
        rep.add_input(a.reference_right)
        ref = triangulate(rig, fio.read_pixels(a.reference_left), fio.read_pixels(a.reference_right))
        rep.metrics["error_3d"] = projection_error_stats(tri.points, ref.points).as_dict()
    if a.out:
        fio.write_polyline_points(tri.points, a.out)
        rep.add_output(a.out)


def cmd_register_lc2(a, rep):
    for p in (a.fixed, a.moving, a.init):
        rep.add_input(p)
    us, mri = fio.read_volume(a.fixed), fio.read_volume(a.moving)
    init = fio.read_transform(a.init)
    cfg = LC2Config(patch_radius=a.patch_radius)
    opt = OptimizerOptions(levels=a.levels, max_iter=a.max_iter, seed=a.seed if a.seed is not None else 0)
    res = register_affine_lc2(us, mri, init, cfg, opt)
    fio.write_transform(res.transform, a.out)
    rep.add_output(a.out)
    rep.metrics.update(res.report())
    rep.converged = res.converged
    if not res.converged:
        raise NotConverged("LC2 optimisation hit its iteration limit")


def cmd_register_deform(a, rep):
    rep.add_input(a.fixed)
    rep.add_input(a.moving)
    fixed, moving = fio.read_volume(a.fixed), fio.read_volume(a.moving)
    if a.direction == "reverse":
        fixed, moving = moving, fixed
    init = init_translation(fixed, moving) if not a.no_init else None
    res = register_demons(fixed, moving, init, DemonsConfig())
    fio.write_field(res.field, a.out)
    rep.add_output(a.out)
    if a.init_out and init is not None:
        fio.write_transform(init, a.init_out)
        rep.add_output(a.init_out)
    rep.metrics.update(res.report(), direction=a.direction)
    rep.converged = res.converged
    if not res.converged:
        raise NotConverged("demons did not converge at every level")


def cmd_eval_tre(a, rep):
    rep.add_input(a.landmarks)
    lm = fio.read_landmarks(a.landmarks)
    T = None
    if a.transform:
        rep.add_input(a.transform)
        T = fio.read_transform(a.transform)
    res = compute_tre(lm, T, tuple(a.axis))
    rep.metrics.update(res.as_dict())
    if a.out:
        fio.write_json(res.as_dict(), a.out)
        rep.add_output(a.out)


def cmd_eval_centerline(a, rep):
    rep.add_input(a.a)
    rep.add_input(a.b)
    la, lb = fio.read_polyline(a.a), fio.read_polyline(a.b)
    if a.transform:
        rep.add_input(a.transform)
        lb = type(lb)(fio.read_transform(a.transform).apply(lb.vertices))
    res = centerline_distance(la, lb, a.points)
    rep.metrics.update(mean=res.mean, reversed=res.reversed, max=float(res.per_point.max()), points=a.points)


def cmd_simulate_waterbath(a, rep):
    budget = ErrorBudget()
    if a.budget:
        rep.add_input(a.budget)
        budget = ErrorBudget(**fio.read_json(a.budget))
    if a.seed is not None:
        budget = replace(budget, seed=a.seed)
    rep.seed = budget.seed
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    system, runs = gen_waterbath_session(budget, a.placements)
    files = {
        "stylus_pairs.csv": lambda p: fio.write_pairs(system.stylus_pairs, p),
        "robot_pairs.csv": lambda p: fio.write_pairs(system.robot_pairs, p),
        "rig.txt": lambda p: fio.write_rig(system.rig, p),
        "dv_T_ecm.txt": lambda p: fio.write_transform(runs[0].dv_T_ecm, p),
        "budget.json": lambda p: fio.write_json(budget.to_dict(), p),
    }
    for k, r in enumerate(runs):
        files[f"sweep{k}.seq"] = functools.partial(fio.write_sequence, r.sequence)
        files[f"labels{k}_left.csv"] = functools.partial(fio.write_pixels, r.labeled_px_left)
        files[f"labels{k}_right.csv"] = functools.partial(fio.write_pixels, r.labeled_px_right)
        files[f"truth{k}_points.csv"] = functools.partial(fio.write_polyline_points, r.truth.grid_points)
    for name, write in files.items():
        write(out / name)
        rep.add_output(out / name)
    rep.metrics.update(placements=len(runs), frames=[len(r.sequence) for r in runs])


def cmd_simulate_volumes(a, rep):
    truth = None
    if a.truth:
        rep.add_input(a.truth)
        truth = fio.read_transform(a.truth)
    seed = a.seed if a.seed is not None else 0
    rep.seed = seed
    pair = gen_multimodal_pair(a.size, truth, seed=seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "us.vol": lambda p: fio.write_volume(pair.us, p),
        "mri.vol": lambda p: fio.write_volume(pair.mri, p),
        "truth.txt": lambda p: fio.write_transform(pair.truth, p),
        "landmarks.csv": lambda p: fio.write_landmarks(pair.landmarks, p),
        "centerline_us.csv": lambda p: fio.write_polyline(pair.centerline_us, p),
        "centerline_mri.csv": lambda p: fio.write_polyline(pair.centerline_mri, p),
    }
    if a.deformation:
        fld = gen_smooth_deformation(pair.us, a.deformation, seed=seed)
        files["deformed_us.vol"] = lambda p: fio.write_volume(warp_volume(pair.us, fld), p)
        files["deformation.fld"] = lambda p: fio.write_field(fld, p)
        rep.metrics["deformation"] = field_stats(fld).as_dict()
    for name, write in files.items():
        write(out / name)
        rep.add_output(out / name)
    rep.metrics.update(size=a.size)


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def globals_(defaults: bool) -> argparse.ArgumentParser:
        # Global flags work before or after the subcommand; the subcommand
        # copy must not overwrite a value given before it.
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        g.add_argument("--report", default=d(None), help="write a JSON run report here (also on failure)")
        g.add_argument("--seed", type=int, default=d(None), help="seed for stochastic steps")
        g.add_argument("--threads", type=int, default=d(0), help="worker threads (0 = auto)")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = globals_(False)
    p = _Parser(prog="usnav", description="US-guided navigation toolkit.", parents=[globals_(True)])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    for name, fn, what in (
        ("calibrate-rigid", cmd_calibrate_rigid, "rigid Procrustes fit of a correspondence CSV"),
        ("calibrate-similarity", cmd_calibrate_similarity, "similarity fit of a correspondence CSV"),
    ):
        sp = add(name, fn, what)
        sp.add_argument("--pairs", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--source", type=_frame, default=Frame.VOLUME, help="frame of the moving points")
        sp.add_argument("--target", type=_frame, default=Frame.VOLUME, help="frame of the fixed points")
        if name == "calibrate-similarity":
            sp.add_argument("--anisotropic", action="store_true", help="per-axis scale")

    sp = add("calibrate-pivot", cmd_calibrate_pivot, "stylus tip offset from pivoting poses")
    sp.add_argument("--poses", required=True)
    sp.add_argument("--out", required=True)

    sp = add("temporal-align", cmd_temporal_align, "lag between two time series")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--max-lag", type=float, required=True)
    sp.add_argument("--out")

    sp = add("compound", cmd_compound, "freehand 3D compounding of a tracked sequence")
    sp.add_argument("--sequence", required=True)
    sp.add_argument("--calibration", required=True, help="probe_T_us transform file")
    sp.add_argument("--spacing", type=float, help="voxel size in mm (default: the US pixel size)")
    sp.add_argument("--fill", action="store_true", help="run stick hole-filling afterwards")
    sp.add_argument("--stick-length", type=int, default=9)
    sp.add_argument("--out", required=True)

    sp = add("fill-holes", cmd_fill_holes, "stick hole-filling of a volume")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--stick-length", type=int, default=9)
    sp.add_argument("--out", required=True)

    sp = add("project", cmd_project, "project 3D points through a transform chain to the stereo rig")
    sp.add_argument("--rig", required=True)
    sp.add_argument("--chain", nargs="+", required=True,
                    help="transforms into the endoscope frame, leftmost applied last; 'inv:' inverts")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", help="segment bright blobs from this volume")
    src.add_argument("--points", help="x,y,z CSV of points")
    sp.add_argument("--count", type=int, default=25)
    sp.add_argument("--threshold", type=float, default=0.25)
    sp.add_argument("--labels-left")
    sp.add_argument("--labels-right")
    sp.add_argument("--out-left")
    sp.add_argument("--out-right")

    sp = add("triangulate", cmd_triangulate, "DLT triangulation of matched pixel lists")
    sp.add_argument("--rig", required=True)
    sp.add_argument("--left", required=True)
    sp.add_argument("--right", required=True)
    sp.add_argument("--reference-left")
    sp.add_argument("--reference-right")
    sp.add_argument("--out")

    sp = add("register-lc2", cmd_register_lc2, "affine US/MRI registration maximising LC2")
    sp.add_argument("--fixed", required=True, help="US volume")
    sp.add_argument("--moving", required=True, help="MRI volume")
    sp.add_argument("--init", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--patch-radius", type=int, default=LC2Config.patch_radius)
    sp.add_argument("--levels", type=int, default=OptimizerOptions.levels)
    sp.add_argument("--max-iter", type=int, default=OptimizerOptions.max_iter)

    sp = add("register-deform", cmd_register_deform, "demons deformable registration")
    sp.add_argument("--fixed", required=True)
    sp.add_argument("--moving", required=True)
    sp.add_argument("--direction", choices=("forward", "reverse"), default="forward",
                    help="reverse swaps the fixed and moving roles")
    sp.add_argument("--no-init", action="store_true", help="skip the centroid translation")
    sp.add_argument("--init-out", help="write the initial translation here")
    sp.add_argument("--out", required=True)

    sp = add("eval-tre", cmd_eval_tre, "target registration error of a landmark CSV")
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--transform", help="applied to the moving landmarks")
    sp.add_argument("--axis", type=float, nargs=3, default=(0.0, 0.0, 1.0))
    sp.add_argument("--out")

    sp = add("eval-centerline", cmd_eval_centerline, "mean distance between two centerlines")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--transform", help="applied to the second centerline")
    sp.add_argument("--points", type=int, default=1000)

    sp = add("simulate-waterbath", cmd_simulate_waterbath, "simulate the wire-grid experiment")
    sp.add_argument("--budget", help="ErrorBudget JSON (default: built-in budget)")
    sp.add_argument("--placements", type=int, default=3)
    sp.add_argument("--out", required=True)

    sp = add("simulate-volumes", cmd_simulate_volumes, "simulate a US/MRI volume pair")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--truth", help="US -> MRI transform file (default identity)")
    sp.add_argument("--deformation", type=float, help="also write a deformed US volume (max mm)")
    sp.add_argument("--out", required=True)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NotConverged, CoverageError) + _NUMERIC_ERRORS):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    rep = fio.RunReport(command=args.command, seed=args.seed)
    rep.metrics["threads"] = args.threads
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        args.func(args, rep)
    except (fio.FormatError, ValueError, OSError, EmptyInputError, NotConverged, RuntimeError) as exc:
        code = _exit_code(exc)
        rep.error = f"{type(exc).__name__}: {exc}"
        print(f"usnav {args.command}: {rep.error}", file=sys.stderr)
    rep.wall_time = time.perf_counter() - t0
    rep.exit_code = code
    if args.report:
        rep.write(args.report)
    return code


if __name__ == "__main__":
    sys.exit(main())
