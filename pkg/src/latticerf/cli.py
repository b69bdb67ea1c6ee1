"""Command-line entry point: ``latticerf <subcommand>``.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, config_hash, from_dict, load_run_config, to_dict
from .dataio import DatasetError, DatasetSpec, generate_dataset, load_dataset, sample_surface, save_png_rgb
from .geometry import CameraPose, Intrinsics

log = logging.getLogger("latticerf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _dims(text: str):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) <= 0:
        raise argparse.ArgumentTypeError(f"dims must be N or HxW, got {text!r}")
    return tuple(vals)


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticerf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="BLAS threads (default: available cores)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible numerics")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--scenes", type=_positive_int, default=1)
    g.add_argument("--views", type=_positive_int, default=8, help="training views per scene")
    g.add_argument("--holdout", type=int, default=2, help="extra held-out views per scene")
    g.add_argument("--dims", type=_dims, default=(48, 48))
    g.add_argument("--kind", choices=("sphere", "random"), default="sphere")
    g.add_argument("--sphere-radius", type=float, default=DatasetSpec.sphere_radius)
    g.add_argument("--orbit-radius", type=float, default=DatasetSpec.orbit_radius)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="coarse-to-fine training")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--stage", choices=("coarse", "fine", "all"), default="all")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    for name, typ in (("seed", int), ("lr", float), ("coarse-steps", int), ("fine-steps", int),
                      ("rays-per-image", int), ("k", int)):
        t.add_argument(f"--{name}", type=typ, default=None, help="override the config value")

    r = sub.add_parser("reconstruct", help="extract a coloured point cloud")
    _model_args(r)
    r.add_argument("--views", default=None, help="N (first N training views) or comma-separated indices")
    r.add_argument("--resolution", type=_positive_int, default=None)
    r.add_argument("--theta", type=float, default=0.0)
    r.add_argument("--confidence", action="store_true", help="add a per-point confidence property")
    r.add_argument("--out", required=True)

    n = sub.add_parser("render", help="render a novel view to PNG")
    _model_args(n)
    n.add_argument("--pose", help="JSON file with rotation, translation, intrinsics, height, width")
    n.add_argument("--view", help="reuse the pose of a dataset view (index or name)")
    n.add_argument("--dims", type=_dims, default=None)
    n.add_argument("--sources", type=_positive_int, default=None)
    n.add_argument("--resolution", type=_positive_int, default=None)
    n.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="PSNR/SSIM on held-out views, optional EMD")
    _model_args(e)
    e.add_argument("--split", choices=("test", "train"), default="test",
                   help="test: held-out views; train: training views")
    e.add_argument("--reference", help="PLY file, or 'analytic' for the synthetic scene surface")
    e.add_argument("--resolution", type=_positive_int, default=None)
    e.add_argument("--out", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--probes", type=_positive_int, default=200)
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    return p


def _model_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", default=None, help="scene name (default: first scene)")


# ---------------------------------------------------------------------------
# helpers


def _load_model(args):
    from .trainer import load_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset, require_masks=False)
    if not ds.scenes:
        raise UsageError(f"dataset {args.dataset} has no scenes")
    if args.scene is None:
        scene = ds.scenes[0]
    else:
        match = [s for s in ds.scenes if s.name == args.scene]
        if not match:
            raise UsageError(f"scene {args.scene!r} not in dataset")
        scene = match[0]
    return ckpt, ckpt.model(), scene


def _pick_views(views, spec: str | None):
    if spec is None:
        return list(views)
    try:
        if "," in spec:
            idx = [int(x) for x in spec.split(",") if x.strip()]
            picked = [views[i] for i in idx]
        else:
            count = int(spec)
            if count < 1:
                raise UsageError("--views needs at least one view")
            if count > len(views):
                raise UsageError(f"--views {count} exceeds the {len(views)} available views")
            picked = list(views[:count])
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad --views {spec!r}: {exc}") from None
    if not picked:
        raise UsageError("--views selected no views")
    return picked


def _sources_for(scene, target, n):
    from .fusion import nearest_sources
    pool = [v for v in scene.train_views if v is not target]
    if not pool:
        raise UsageError("no source views available")
    return nearest_sources(pool, target.pose.center, min(n, len(pool)))


def _limit_threads(args):
    n = 1 if args.deterministic else args.threads
    if n is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(n_scenes=args.scenes, n_views=args.views, n_holdout=args.holdout, dims=args.dims,
                       kind=args.kind, sphere_radius=args.sphere_radius, orbit_radius=args.orbit_radius)
    manifest = generate_dataset(spec, args.out, seed=args.seed)
    print(f"wrote {len(manifest['scenes'])} scene(s) to {args.out}")
    return EXIT_OK


def _train_config(args):
    cfg, extras = load_run_config(args.config)
    overrides = {}
    for name in ("seed", "lr", "coarse_steps", "fine_steps", "rays_per_image", "k"):
        val = getattr(args, name)
        if val is not None:
            overrides[name] = val
    if overrides:
        d = to_dict(cfg)
        d.update(overrides)
        cfg = from_dict(d)
    dataset = args.dataset or extras.get("dataset")
    out = args.out or extras.get("out_dir")
    if not dataset or not out:
        raise UsageError("train needs a dataset and an output directory (flags or config)")
    return cfg, dataset, Path(out)


def cmd_train(args) -> int:
    from .trainer import load_checkpoint, train_coarse, train_fine
    cfg, dataset, out = _train_config(args)
    ds = load_dataset(dataset)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**to_dict(cfg), "config_hash": config_hash(cfg)}, indent=1))
    resume = load_checkpoint(args.resume, expect=cfg) if args.resume else None
    ckpt = None
    if args.stage in ("coarse", "all"):
        if resume is None or resume.stage == "coarse":
            ckpt = train_coarse(ds, cfg, out, resume=resume, checkpoint_every=args.checkpoint_every)
            print(f"coarse stage done: {out / 'coarse.npz'}")
        else:
            ckpt = resume
    if args.stage in ("fine", "all"):
        start = ckpt or resume
        if start is None:
            path = out / "coarse.npz"
            if not path.exists():
                raise UsageError("the fine stage needs a coarse checkpoint (run --stage coarse or pass --resume)")
            start = load_checkpoint(path, expect=cfg)
        ckpt = train_fine(ds, cfg, start, out, checkpoint_every=args.checkpoint_every)
        print(f"fine stage done: {out / 'fine.npz'}")
    print(f"loss log: {out / 'loss_log.csv'} (config {config_hash(cfg)})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .fusion import extract_cloud, write_ply
    ckpt, model, scene = _load_model(args)
    if args.theta < 0:
        raise UsageError("--theta must be non-negative")
    views = _pick_views(scene.train_views, args.views)
    res = args.resolution or ckpt.config.coarse_resolution
    cloud = extract_cloud(model, views, res, args.theta, ckpt.config)
    comment = f"config_hash {ckpt.config_hash}\nseed {ckpt.config.seed}\nviews {len(views)} resolution {res}"
    write_ply(args.out, cloud, confidence=args.confidence, comment=comment)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def _pose_from_file(path) -> tuple[CameraPose, tuple]:
    d = json.loads(Path(path).read_text())
    try:
        K = d["intrinsics"]
        pose = CameraPose(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                          np.asarray(d["translation"], dtype=np.float64),
                          Intrinsics(K["fx"], K["fy"], K["cx"], K["cy"]))
        pose.check()
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad pose file {path}: {exc}") from None
    return pose, (int(d["height"]), int(d["width"])) if "height" in d else None


def _find_view(scene, key):
    for i, v in enumerate(scene.views):
        if v.name == key or str(i) == key:
            return v
    raise UsageError(f"view {key!r} not found in scene {scene.name}")


def cmd_render(args) -> int:
    from .fusion import nearest_sources, render_view
    ckpt, model, scene = _load_model(args)
    target = None
    if args.pose:
        pose, dims = _pose_from_file(args.pose)
    elif args.view is not None:
        target = _find_view(scene, args.view)
        pose, dims = target.pose, tuple(target.dims)
    else:
        raise UsageError("render needs --pose or --view")
    dims = args.dims or dims
    if dims is None:
        raise UsageError("render needs --dims when the pose file has no height/width")
    n = args.sources or ckpt.config.views_per_scene_per_epoch
    pool = [v for v in scene.train_views if v is not target]
    sources = nearest_sources(pool, pose.center, min(n, len(pool)))
    image = render_view(model, sources, pose, dims, ckpt.config, resolution=args.resolution)
    save_png_rgb(Path(args.out), image)
    print(f"rendered {dims[0]}x{dims[1]} view to {args.out}")
    return EXIT_OK


def evaluate(model, cfg, scenes, split: str, resolution=None, chash: str = ""):
    """Render every view of ``split`` from its nearest training views and score it."""
    from .fusion import render_view
    from .metrics import MetricReport, psnr, ssim
    report = MetricReport(config_hash=chash, split=split)
    for scene in scenes:
        targets = scene.holdout_views if split == "test" else scene.train_views
        for view in targets:
            sources = _sources_for(scene, view, cfg.views_per_scene_per_epoch)
            image = render_view(model, sources, view.pose, view.dims, cfg, resolution=resolution)
            report.views.append(f"{scene.name}/{view.name}")
            report.psnr.append(psnr(image, view.image))
            report.ssim.append(ssim(image, view.image))
    return report


def cmd_eval(args) -> int:
    from .fusion import cloud_from_ply, extract_cloud
    from .metrics import cloud_emd
    ckpt, model, scene = _load_model(args)
    targets = scene.holdout_views if args.split == "test" else scene.train_views
    if not targets:
        raise UsageError(f"the {args.split} split of scene {scene.name} is empty")
    report = evaluate(model, ckpt.config, [scene], args.split, args.resolution, ckpt.config_hash)
    if args.reference:
        if args.reference == "analytic":
            if scene.reference is None:
                raise UsageError("scene has no analytic reference")
            ref = sample_surface(scene.reference, 512, np.random.default_rng(ckpt.config.seed))
        else:
            ref = cloud_from_ply(args.reference).positions
        res = args.resolution or ckpt.config.coarse_resolution
        cloud = extract_cloud(model, scene.train_views, res, 0.0, ckpt.config)
        report.emd = cloud_emd(cloud.positions, ref, seed=ckpt.config.seed)
    Path(args.out).write_text(report.dumps())
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_gradcheck
    results = run_gradcheck(n_probes=args.probes, h=args.h, tol=args.tol, seed=args.seed)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "render": cmd_render, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .trainer import CheckpointError, SchedulingError, TrainingDiverged
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads(args)
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: {exc}; report: {exc.report_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ad.NonFiniteError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetError, CheckpointError, SchedulingError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
