"""Command-line entry point: ``diffsplat {render,synth,fit,eval,align,gradcheck,bench}``.

Exit codes: 0 success, 1 domain error (bad file contents, divergence, failed
check), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("diffsplat")

HELP_WIDTH = 88


class DomainError(Exception):
    pass


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}") from None
    if a > b:
        raise argparse.ArgumentTypeError(f"range {text!r} is empty")
    return a, b


def _dims(text: str) -> tuple[int, int, int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D or D1,D2,D3, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected D or D1,D2,D3 with positive sizes, got {text!r}")
    return tuple(vals)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffsplat", formatter_class=_formatter,
        description="Differentiable point cloud rendering and multi-view fitting.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $DIFFSPLAT_THREADS or all cores)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded linear algebra and ordered reductions")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("render", formatter_class=_formatter, help="render a cloud from one camera")
    p.add_argument("--cloud", required=True, help="input ASCII PLY")
    p.add_argument("--camera", required=True, help="camera JSON")
    p.add_argument("--grid", type=_dims, default=(64, 64, 64), help="grid size D or D1,D2,D3")
    p.add_argument("--modality", default="sil", choices=["sil", "silhouette", "depth", "color"])
    p.add_argument("--path", default="basic", choices=["basic", "fast"])
    p.add_argument("--sigma", type=float, default=None, help="sigma for points without one")
    p.add_argument("--background", type=_floats, default=None, help="color background r,g,b")
    p.add_argument("--volume", default=None, help="also dump the occupancy volume here")
    p.add_argument("--out", required=True, help="output image (.png or .pfm)")

    p = sub.add_parser("synth", formatter_class=_formatter, help="render random views of a cloud")
    p.add_argument("--cloud", required=True, help="input ASCII PLY")
    p.add_argument("--views", type=int, required=True, help="number of views M")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--elev-range", type=_pair, default=(-20.0, 40.0), help="elevation degrees a,b")
    p.add_argument("--azim-range", type=_pair, default=(0.0, 360.0), help="azimuth degrees a,b")
    p.add_argument("--grid", type=_dims, default=(64, 64, 64), help="grid size D or D1,D2,D3")
    p.add_argument("--camera-kind", default="persp", choices=["ortho", "persp"])
    p.add_argument("--modality", default="sil", choices=["sil", "silhouette", "depth", "color"])
    p.add_argument("--path", default="basic", choices=["basic", "fast"])
    p.add_argument("--sigma", type=float, default=None, help="sigma for points without one")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", formatter_class=_formatter, help="fit a cloud (and poses) to views")
    p.add_argument("--views", required=True, help="directory written by synth")
    p.add_argument("--config", default=None, help="fit config JSON")
    p.add_argument("--supervised", action="store_true", help="use the poses stored with the views")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", formatter_class=_formatter, help="score a fitted cloud and poses")
    p.add_argument("--pred", required=True, help="fitted PLY")
    p.add_argument("--gt", required=True, help="ground-truth PLY")
    p.add_argument("--fit-dir", default=None, help="fit output with pose JSONs")
    p.add_argument("--views", default=None, help="synth directory with ground-truth poses")
    p.add_argument("--align", action="store_true", help="ICP-align the prediction first")
    p.add_argument("--out", required=True, help="metrics JSON")

    p = sub.add_parser("align", formatter_class=_formatter, help="ICP-align one cloud onto another")
    p.add_argument("--src", required=True, help="PLY to move")
    p.add_argument("--dst", required=True, help="reference PLY")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--with-scale", action="store_true")
    p.add_argument("--restarts", action="store_true", help="also try the 24 axis-aligned rotations")
    p.add_argument("--out", required=True, help="transform JSON")

    p = sub.add_parser("gradcheck", formatter_class=_formatter,
                       help="compare adjoints against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--grid", type=_dims, default=(16, 16, 16), help="grid size D or D1,D2,D3")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error per group")
    p.add_argument("--out", default=None, help="optional JSON report")

    p = sub.add_parser("bench", formatter_class=_formatter, help="time both splatting paths")
    p.add_argument("--cases", default="basic:2000:32,fast:16000:64",
                   help="comma-separated path:N:D triples")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")
    return parser


def _configure_threads(args) -> int:
    threads = args.threads
    if threads is None and os.environ.get("DIFFSPLAT_THREADS"):
        try:
            threads = int(os.environ["DIFFSPLAT_THREADS"])
        except ValueError:
            raise DomainError("DIFFSPLAT_THREADS must be an integer") from None
    if threads is None:
        threads = os.cpu_count() or 1
    if threads < 1:
        raise DomainError("thread count must be positive")
    if args.deterministic:
        threads = 1
    from threadpoolctl import threadpool_limits

    threadpool_limits(threads)
    return threads


def _load_cloud(path, sigma=None):
    from .io import DEFAULT_SIGMA, read_ply

    return read_ply(path, default_sigma=DEFAULT_SIGMA if sigma is None else sigma)


def _ext_for(modality: str) -> str:
    return ".pfm" if modality == "depth" else ".png"


def cmd_render(args, threads: int) -> None:
    from .geom import GridSpec
    from .io import read_camera, write_image, write_volume
    from .render import render_trace

    cloud = _load_cloud(args.cloud, args.sigma)
    pose, cam = read_camera(args.camera)
    t0 = time.perf_counter()
    trace = render_trace(cloud, pose, cam, GridSpec(args.grid), args.modality, args.path,
                         background=args.background)
    elapsed = time.perf_counter() - t0
    write_image(args.out, trace.image)
    if args.volume:
        write_volume(args.volume, trace.occ)
    print(f"render: {elapsed * 1000:.1f} ms ({args.path}, {len(cloud)} points)", file=sys.stderr)


def cmd_synth(args, threads: int) -> None:
    from .geom import CameraModel, GridSpec
    from .io import write_camera, write_image, write_ply
    from .render import canonical_modality, render
    from .synth import sample_poses

    cloud = _load_cloud(args.cloud, args.sigma)
    cam = CameraModel(args.camera_kind)
    grid = GridSpec(args.grid)
    modality = canonical_modality(args.modality)
    rng = np.random.default_rng(args.seed)
    poses = sample_poses(args.views, rng, cam, args.elev_range, args.azim_range)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = _ext_for(modality)
    for i, pose in enumerate(poses):
        write_image(out / f"view_{i:03d}{ext}", render(cloud, pose, cam, grid, modality, args.path))
        write_camera(out / f"view_{i:03d}.json", pose, cam)
    write_ply(out / "source.ply", cloud)
    manifest = {"format_version": 1, "views": args.views, "grid": list(grid.dims), "modality": modality,
                "path": args.path, "seed": args.seed, "image_suffix": ext}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("wrote %d views to %s", args.views, out)


def load_views(directory, supervised: bool):
    """Read a synth directory into a :class:`~diffsplat.fit.ViewSet`."""
    from .fit import ViewSet
    from .geom import GridSpec
    from .io import FormatError, read_camera, read_image

    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DomainError(f"{directory}: no manifest.json (expected synth output)")
    manifest = json.loads(manifest_path.read_text())
    for key in ("views", "grid", "modality", "image_suffix"):
        if key not in manifest:
            raise FormatError(f"manifest.{key}: missing field")
    images, poses, cam = [], [], None
    for i in range(manifest["views"]):
        images.append(read_image(directory / f"view_{i:03d}{manifest['image_suffix']}"))
        pose, cam = read_camera(directory / f"view_{i:03d}.json")
        poses.append(pose)
    return ViewSet(images, cam, GridSpec(tuple(manifest["grid"])), manifest["modality"],
                   poses if supervised else None)


def cmd_fit(args, threads: int) -> None:
    from .fit import FitConfig, FitDivergence, fit_views
    from .io import read_fit_config, write_camera, write_fit_config, write_loss_trace, write_ply

    config = read_fit_config(args.config) if args.config else FitConfig()
    if args.supervised:
        config.supervised = True
    if args.steps is not None:
        config.steps = args.steps
    if args.seed is not None:
        config.seed = args.seed
    config.threads = threads
    views = load_views(args.views, config.supervised)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(state, rec):
        if rec.step % 100 == 0:
            log.info("step %d loss %.4f dropout %.3f sigma %.4f", rec.step, rec.hindsight_loss,
                     rec.dropout, rec.sigma)

    t0 = time.perf_counter()
    try:
        result = fit_views(views, config, dump_dir=out, callback=progress)
    except FitDivergence as exc:
        raise DomainError(f"{exc}; state dumped to {exc.dump_path}") from exc
    log.info("fit finished in %.1f s", time.perf_counter() - t0)
    write_ply(out / "cloud.ply", result.cloud)
    for i, (pose, student) in enumerate(zip(result.poses, result.students)):
        write_camera(out / f"pose_{i:03d}.json", pose, views.cam,
                     extra={"student_rotation": [float(v) for v in student.rotation]})
    write_loss_trace(out / "loss.csv", result.trace)
    write_fit_config(out / "config.json", config)


def cmd_eval(args, threads: int) -> None:
    from .geom import quat_from_matrix, quat_mul
    from .io import read_camera
    from .metrics import RigidTransform, chamfer, icp_align, pose_angle, pose_metrics

    pred = _load_cloud(args.pred).positions
    gt = _load_cloud(args.gt).positions
    transform = RigidTransform()
    report: dict = {"format_version": 1}
    if args.align:
        res = icp_align(pred, gt, restarts=True)
        transform = res.transform
        pred = transform.apply(pred)
        report["alignment"] = {**transform.as_dict(), "rms": res.rms}
    ch = chamfer(pred, gt)
    report["chamfer"] = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                         for k, v in ch.as_dict().items()}
    if args.fit_dir and args.views:
        errors = []
        i = 0
        while (Path(args.fit_dir) / f"pose_{i:03d}.json").exists():
            fitted, _ = read_camera(Path(args.fit_dir) / f"pose_{i:03d}.json")
            truth, _ = read_camera(Path(args.views) / f"view_{i:03d}.json")
            # the fitted frame maps into the reference frame through the alignment
            expected = quat_mul(truth.rotation, quat_from_matrix(transform.matrix()))
            errors.append(pose_angle(fitted.rotation, expected))
            i += 1
        if errors:
            report["pose"] = pose_metrics(errors).as_dict()
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    print(f"chamfer total {ch.total:.6g} (x100 normalized {ch.total_x100_normalized:.4g})", file=sys.stderr)


def cmd_align(args, threads: int) -> None:
    from .metrics import icp_align

    src = _load_cloud(args.src).positions
    dst = _load_cloud(args.dst).positions
    res = icp_align(src, dst, args.max_iters, args.tol, args.with_scale, args.restarts)
    angle = math.degrees(2.0 * math.acos(min(1.0, abs(res.transform.rotation[0]))))
    doc = {"format_version": 1, **res.transform.as_dict(), "rms": res.rms,
           "rotation_angle_deg": angle, "iterations": res.iterations, "rms_trace": res.rms_trace}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"rotation {angle:.4f} deg, rms {res.rms:.3g}, {res.iterations} iterations", file=sys.stderr)


def cmd_gradcheck(args, threads: int) -> None:
    from .gradcheck import run_gradcheck

    rows = run_gradcheck(args.seed, args.instances, args.points, args.grid)
    worst: dict[str, float] = {}
    for row in rows:
        for group, err in row["errors"].items():
            worst[group] = max(worst.get(group, 0.0), err)
    for group, err in worst.items():
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{group:>14s}  max rel err {err:.2e}  {status}")
    if args.out:
        doc = {"format_version": 1, "tol": args.tol,
               "groups": {g: {"max_rel_err": e, "passed": e <= args.tol} for g, e in worst.items()},
               "instances": rows}
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    if any(err > args.tol for err in worst.values()):
        raise DomainError("gradient check failed")


def cmd_bench(args, threads: int) -> None:
    from .bench import parse_cases, run_bench, write_bench_csv

    rows = run_bench(parse_cases(args.cases), args.repeats, args.seed)
    write_bench_csv(args.out, rows)
    for row in rows:
        print(f"{row['path']:>5s} N={row['N']:<6d} V={row['V']:<7d} {row['wall_time_s'] * 1000:9.2f} ms",
              file=sys.stderr)


COMMANDS = {
    "render": cmd_render, "synth": cmd_synth, "fit": cmd_fit, "eval": cmd_eval,
    "align": cmd_align, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .io import FormatError

    try:
        threads = _configure_threads(args)
        COMMANDS[args.command](args, threads)
    except (DomainError, FormatError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"diffsplat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
