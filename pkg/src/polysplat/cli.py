"""Command-line entry points: train, render, eval, bench, check-grad, export.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _emit(record, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(record, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def fixture_path(name):
    return Path(str(resources.files("polysplat") / "data" / name))


# ---------------------------------------------------------------------------
# shared options


def _add_render_flags(p):
    p.add_argument("--no-ray-space", action="store_true",
                   help="exact per-vertex projection instead of the local affine map")
    p.add_argument("--no-aa-2d", action="store_true", help="disable the 2D screen filter")
    p.add_argument("--no-aa-3d", action="store_true", help="disable the 3D smoothing filter")
    p.add_argument("--background", type=float, nargs=3, metavar=("R", "G", "B"))


def _add_common(p):
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="bit-reproducible run (the default pipeline already is; kept explicit)")


def _dtype(args, default="single"):
    return "float64" if (args.precision or default) == "double" else "float32"


def _settings(args, precision_default="single"):
    from .projection import APPROXIMATE, EXACT
    from .raster import RenderSettings

    return RenderSettings(
        projection=EXACT if args.no_ray_space else APPROXIMATE,
        filter_2d=0.0 if args.no_aa_2d else 0.1,
        use_filter_3d=not args.no_aa_3d,
        background=tuple(args.background) if args.background else (0.0, 0.0, 0.0),
        dtype=_dtype(args, precision_default),
    )


def _threads(args):
    if getattr(args, "threads", None):
        import numba

        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))


def _scene(path):
    from .sceneio import load_colmap

    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"scene directory not found: {p}")
    try:
        return load_colmap(p)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _checkpoint(path, kind=None):
    from .sceneio import load_checkpoint

    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p, kind)


def _split(n, test_every, which):
    idx = list(range(n))
    if not test_every:
        return idx
    test = [i for i in idx if i % test_every == 0]
    if which == "test":
        return test
    if which == "train":
        return [i for i in idx if i % test_every != 0]
    return idx


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    from .population import init_from_sfm
    from .sceneio import apply_overrides, load_config, load_images, save_checkpoint
    from .trainer import Dataset, EventLog, TrainConfig, train_loop

    scene = _scene(args.scene)
    cfg = TrainConfig()
    if args.config:
        sections = load_config(args.config)
        for name in sections:
            if name not in ("train", "population"):
                raise UsageError(f"{args.config}: unknown config section {name!r}")
        cfg = apply_overrides(cfg, sections.get("train", {}), str(args.config))
        cfg = TrainConfig(**{**cfg.__dict__,
                             "population": apply_overrides(cfg.population,
                                                           sections.get("population", {}),
                                                           str(args.config))})
    over = {}
    if args.iterations is not None:
        over["iterations"] = args.iterations
    if args.seed is not None:
        over["seed"] = args.seed
    if args.precision:
        over["precision"] = _dtype(args)
    if args.no_ray_space:
        over["projection"] = "exact"
    if args.no_aa_2d:
        over["filter_2d"] = False
    if args.no_aa_3d:
        over["filter_3d"] = False
    if args.background:
        over["background"] = tuple(args.background)
    if args.checkpoint_every:
        over["checkpoint_iterations"] = tuple(range(args.checkpoint_every,
                                                    (args.iterations or cfg.iterations) + 1,
                                                    args.checkpoint_every))
    cfg = TrainConfig(**{**cfg.__dict__, **over})
    if args.mcmc_cap is not None:
        cfg.population = apply_overrides(cfg.population, {"mcmc_enabled": True,
                                                          "mcmc_cap": args.mcmc_cap})
    if len(scene.points) == 0:
        raise UsageError(f"{args.scene}: scene has no 3D points to initialize from")

    images = load_images(scene, args.divisor)
    cams = scene.training_cameras(args.divisor)
    train_ids = _split(len(cams), args.test_every, "train")
    data = Dataset([cams[i] for i in train_ids], [images[i] for i in train_ids],
                   names=[cams[i].name for i in train_ids])
    prims = init_from_sfm(scene.points, scene.colors, args.kind, seed=cfg.seed,
                          dtype=np.dtype(cfg.precision))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()

    def on_checkpoint(it, p):
        save_checkpoint(p, out / f"checkpoint_{it:06d}.ply", it, digest)

    with open(out / "events.jsonl", "w") as log_fh:
        log = EventLog(log_fh)
        final = train_loop(data, cfg, prims, log, on_checkpoint)
    path = save_checkpoint(final, out / "final.ply", cfg.iterations, digest)
    _emit({"event": "saved", "path": str(path), "count": len(final),
           "iterations": cfg.iterations})
    return EXIT_OK


def _render_cameras(args):
    if args.scene:
        scene = _scene(args.scene)
        cams = scene.training_cameras(args.divisor)
        return [cams[i] for i in _split(len(cams), args.test_every, args.split)]
    from .synthetic import sphere_rig

    return sphere_rig(args.views, args.radius, args.width, args.height)


def cmd_render(args):
    from .oracle import render_exact
    from .raster import render
    from .sceneio import save_depth, save_png

    ckpt = _checkpoint(args.checkpoint)
    settings = _settings(args)
    if args.oracle:
        settings.dtype = "float64"
    cams = _render_cameras(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    modes = args.mode or ["color"]
    for cam in cams:
        stem = Path(cam.name).stem if cam.name else f"view_{len(list(out.iterdir())):04d}"
        if args.oracle:
            r = render_exact(ckpt.prims, cam, settings.background, settings.use_filter_3d)
        else:
            r = render(ckpt.prims, cam, settings)
        files = {}
        if "color" in modes:
            files["color"] = str(out / f"{stem}.png")
            save_png(r.color, files["color"])
        if "alpha" in modes:
            files["alpha"] = str(out / f"{stem}_alpha.png")
            save_png(r.alpha, files["alpha"])
        if "depth" in modes:
            files["depth"] = str(out / f"{stem}.depth")
            save_depth(r.depth, files["depth"])
        _emit({"event": "render", "view": cam.name, "oracle": bool(args.oracle), **files})
    return EXIT_OK


def cmd_eval(args):
    from .oracle import MetricReport
    from .raster import render
    from .sceneio import image_dir, load_image

    ckpt = _checkpoint(args.checkpoint)
    scene = _scene(args.scene)
    settings = _settings(args)
    cams = scene.training_cameras(args.divisor)
    ids = _split(len(cams), args.test_every, args.split)
    base = Path(args.images) if args.images else image_dir(scene)
    report = MetricReport()
    records = []
    for i in ids:
        cam = cams[i]
        p = base / scene.views[i].name
        if not p.exists():
            raise UsageError(f"missing ground-truth image for view {scene.views[i].name!r}: {p}")
        gt = load_image(p, args.divisor)
        img = np.clip(render(ckpt.prims, cam, settings).color, 0.0, 1.0)
        report.add(cam.name, img, gt)
        rec = {"event": "view", "view": cam.name, "psnr": report.psnr[-1], "ssim": report.ssim[-1]}
        records.append(rec)
        _emit(rec)
    summary = {"event": "summary", "views": len(ids), "mean_psnr": report.mean_psnr,
               "mean_ssim": report.mean_ssim, "count": len(ckpt.prims),
               "kind": ckpt.kind, "iteration": ckpt.iteration}
    _emit(summary)
    if args.output:
        with open(args.output, "w") as fh:
            for rec in records + [summary]:
                _emit(rec, fh)
    return EXIT_OK


def bench_report(prims, cams, settings, warmup=True):
    """Mean per-stage milliseconds plus per-view work counters."""
    from .raster import render

    if warmup:
        for cam in cams:
            render(prims, cam, settings)
    stages = {"preprocess": [], "sort_tile": [], "render": []}
    views = []
    for cam in cams:
        r = render(prims, cam, settings)
        for k in stages:
            stages[k].append(r.timings[k])
        views.append({"view": cam.name, **r.counters})
    means = {f"{k}_ms": 1e3 * float(np.mean(v)) if v else 0.0 for k, v in stages.items()}
    counters = {k: float(np.mean([v[k] for v in views])) if views else 0.0
                for k in ("frustum", "tile_list", "iterated", "intersected")}
    return {"stages": means, "counters": counters, "views": views}


def cmd_bench(args):
    ckpt = _checkpoint(args.checkpoint)
    settings = _settings(args)
    cams = _render_cameras(args)
    rep = bench_report(ckpt.prims, cams, settings)
    for v in rep["views"]:
        _emit({"event": "view", **v})
    _emit({"event": "bench", "count": len(ckpt.prims), "views": len(cams), **rep["stages"],
           **rep["counters"]})
    return EXIT_OK


def corrupt_gradients(grads):
    """Negative-control hook: flips the sign of every center gradient."""
    grads.centers = -grads.centers
    return grads


def cmd_check_grad(args):
    from .backward import finite_difference_check
    from .projection import Camera

    path = args.checkpoint or fixture_path("three_prims.ply")
    ckpt = _checkpoint(path)
    settings = _settings(args)
    dtype = settings.dtype
    tol = args.tolerance if args.tolerance is not None else (1e-3 if dtype == "float32" else 1e-5)
    cam = Camera.look_at(np.array([0.3, -0.4, -3.0]), np.zeros(3), width=args.size,
                         height=args.size, fov_deg=40.0)
    rng = np.random.default_rng(args.seed or 0)
    target = rng.uniform(0.0, 1.0, (args.size, args.size, 3))
    report = finite_difference_check(ckpt.prims.astype(dtype), cam, target, settings,
                                     tolerance=tol,
                                     grad_hook=corrupt_gradients if args.corrupt else None)
    for line in report.lines():
        print(line)
    summary = {"event": "check-grad", "checked": len(report.checked),
               "excluded": len(report.excluded), "unresolved": len(report.unresolved),
               "failed": len(report.failures),
               "max_rel_error": report.max_rel_error, "tolerance": tol,
               "precision": args.precision or "single", "passed": report.passed}
    _emit(summary)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_export(args):
    from .sceneio import save_checkpoint

    ckpt = _checkpoint(args.input)
    save_checkpoint(ckpt.prims, args.output, ckpt.iteration, ckpt.config_hash,
                    ascii=args.format == "ascii")
    _emit({"event": "export", "input": str(args.input), "output": str(args.output),
           "format": args.format, "count": len(ckpt.prims)})
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_view_source(p):
    p.add_argument("--scene", help="COLMAP scene directory providing cameras")
    p.add_argument("--divisor", type=int, default=1, help="resolution divisor")
    p.add_argument("--test-every", type=int, default=0,
                   help="hold out every n-th view as the test split (0: none)")
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--views", type=int, default=8, help="orbit views when no scene is given")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)


def build_parser():
    parser = argparse.ArgumentParser(prog="polysplat",
                                     description="Linear-primitive differentiable renderer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize primitives on a COLMAP scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.add_argument("--kind", choices=("octahedron", "tetrahedron"), default="octahedron")
    p.add_argument("--iterations", type=int)
    p.add_argument("--divisor", type=int, default=1)
    p.add_argument("--test-every", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--mcmc-cap", type=int, default=None,
                   help="enable budgeted relocation with this primitive cap")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render color/alpha/depth images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", action="append", choices=("color", "alpha", "depth"))
    p.add_argument("--oracle", action="store_true", help="use the brute-force reference renderer")
    _add_view_source(p)
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM against ground-truth images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--images", help="ground-truth directory (default: scene images)")
    p.add_argument("--divisor", type=int, default=1)
    p.add_argument("--test-every", type=int, default=0)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--output", help="also write the report to this file")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage timings and work counters")
    p.add_argument("--checkpoint", required=True)
    _add_view_source(p)
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check-grad", help="finite-difference gradient validation")
    p.add_argument("--checkpoint", help="default: bundled 3-primitive fixture")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("export", help="convert checkpoints between binary and text PLY")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=("binary", "ascii"), default="binary")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    from .sceneio import SceneFormatError

    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        if hasattr(args, "threads"):
            _threads(args)
        return args.func(args)
    except (UsageError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    warnings.simplefilter("default")
    sys.exit(main())
