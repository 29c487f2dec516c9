"""Command-line entry points.

Subcommands: fit, render, orbit, bench, eval, subdivide, info, serve.
``render`` runs the full inference pipeline: articulate, per-face world
gaussians, projection, tile compositing, mesh normal map, shading, final
composition over the background.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import assets, metrics
from .articulate import NetworkBundle, skin_only
from .assets import DataError, FormatError
from .fit import FrameObservation, LossWeights, TrainConfig, train
from .model import Pose, subdivide, validate
from .render import RENDER_MODES, mode_image, render
from .splat import Camera, Splat2D, rasterize
from .tape import Tensor


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"size must look like 512x512, got {text!r}") from e


def _parse_background(text):
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"background must be r,g,b in [0,1]: {text!r}") from e
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("background needs three comma-separated values")
    return tuple(parts)


def build_parser():
    p = argparse.ArgumentParser(prog="gomesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    fp = sub.add_parser("fit", help="fit an avatar to posed frame observations")
    fp.add_argument("frames_dir")
    fp.add_argument("output")
    fp.add_argument("--config", default=None)
    fp.add_argument("--seed", type=int, default=None)

    rp = sub.add_parser("render", help="render one frame of an avatar")
    rp.add_argument("avatar")
    rp.add_argument("--pose", default="identity", help="pose JSON file or 'identity'")
    rp.add_argument("--camera", default=None, help="camera JSON file (default: framed)")
    rp.add_argument("--size", type=_parse_size, default=None, help="WxH")
    rp.add_argument("--mode", choices=RENDER_MODES, default="final")
    rp.add_argument("--background", type=_parse_background, default=(0.0, 0.0, 0.0))
    rp.add_argument("-o", "--output", required=True)

    op = sub.add_parser("orbit", help="render a turntable around the avatar")
    op.add_argument("avatar")
    op.add_argument("--frames", type=int, default=12)
    op.add_argument("--size", type=_parse_size, default=(256, 256))
    op.add_argument("--mode", choices=RENDER_MODES, default="final")
    op.add_argument("--elevation", type=float, default=10.0)
    op.add_argument("-o", "--output", required=True, help="output directory")

    bp = sub.add_parser("bench", help="rasterizer and articulation throughput")
    bp.add_argument("--gaussians", type=int, default=100_000)
    bp.add_argument("--size", type=int, default=512)
    bp.add_argument("--articulate-vertices", type=int, default=0,
                    help="also time skeleton articulation at this vertex count")
    bp.add_argument("--joints", type=int, default=24)
    bp.add_argument("--warmup", type=int, default=10)
    bp.add_argument("--runs", type=int, default=100)
    bp.add_argument("--seed", type=int, default=0)

    ep = sub.add_parser("eval", help="image metrics between two directories")
    ep.add_argument("pred_dir")
    ep.add_argument("gt_dir")

    sp = sub.add_parser("subdivide", help="subdivide an avatar once")
    sp.add_argument("input")
    sp.add_argument("output")

    ip = sub.add_parser("info", help="describe an avatar file")
    ip.add_argument("avatar")

    vp = sub.add_parser("serve", help="interactive render service")
    vp.add_argument("avatar")
    vp.add_argument("--bind", default="127.0.0.1:8765")
    return p


# -- fit -------------------------------------------------------------------------


def load_train_config(path, seed=None):
    cfg = TrainConfig()
    init_avatar = None
    tubeman = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        weights = raw.pop("weights", None)
        init_avatar = raw.pop("init_avatar", None)
        tubeman = raw.pop("tubeman", {})
        for key, value in raw.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown training config key {key!r}")
            setattr(cfg, key, value)
        if weights:
            cfg.weights = LossWeights(**weights)
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg, init_avatar, tubeman


def load_frames_dir(frames_dir):
    """Frame observations from frame_XXXX.png / mask_XXXX.png / frame_XXXX.json."""
    frames_dir = Path(frames_dir)
    metas = sorted(frames_dir.glob("frame_*.json"))
    if not metas:
        raise FileNotFoundError(f"no frame_*.json metadata in {frames_dir}")
    frames = []
    for meta_path in metas:
        stem = meta_path.stem
        with open(meta_path) as fh:
            meta = json.load(fh)
        cam = assets.camera_from_dict(meta["camera"])
        pose = assets.pose_from_dict(meta["pose"])
        image = assets.load_image(frames_dir / f"{stem}.png")
        mask = assets.load_mask(frames_dir / f"mask_{stem.split('_', 1)[1]}.png")
        frames.append(FrameObservation(image, mask, pose, cam))
    return frames


def cmd_fit(args):
    cfg, init_avatar, tubeman = load_train_config(args.config, args.seed)
    frames = load_frames_dir(args.frames_dir)
    if init_avatar:
        avatar, _ = assets.load_avatar(init_avatar)
    else:
        avatar = assets.make_test_rig(
            joints=tubeman.get("joints", frames[0].pose.joint_count),
            segments=tubeman.get("segments", 16),
            radial=tubeman.get("radial", 12),
            height=tubeman.get("height", 0.8),
            radius=tubeman.get("radius", 0.07),
        )
    result = train(frames, avatar, cfg)
    assets.save_avatar(result.avatar, result.nets, args.output)
    last = result.log[-1] if result.log else {}
    print(
        f"fit: {len(frames)} frames, {cfg.total_iterations} iterations, "
        f"final loss {last.get('total', float('nan')):.5f} -> {args.output}"
    )
    return 0


# -- render ----------------------------------------------------------------------


def _camera_for(args, avatar):
    if args.camera:
        cam = assets.load_camera(args.camera)
        if args.size:
            cam = cam.resized(*args.size)
        return cam
    w, h = args.size or (512, 512)
    return assets.frame_camera(avatar, w, h)


def _pose_for(spec, avatar):
    if spec == "identity":
        return Pose.identity(avatar.rig.joint_count)
    return assets.load_pose(spec, expected_joints=avatar.rig.joint_count)


def cmd_render(args):
    avatar, nets = assets.load_avatar(args.avatar)
    cam = _camera_for(args, avatar)
    pose = _pose_for(args.pose, avatar)
    out = render(avatar, pose, nets, cam)
    assets.save_image(args.output, mode_image(out, args.mode, args.background))
    print(f"render: {cam.width}x{cam.height} {args.mode} -> {args.output}")
    return 0


def cmd_orbit(args):
    avatar, nets = assets.load_avatar(args.avatar)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    pose = Pose.identity(avatar.rig.joint_count)
    w, h = args.size
    for i in range(args.frames):
        cam = assets.frame_camera(
            avatar, w, h, azimuth_deg=360.0 * i / args.frames,
            elevation_deg=args.elevation,
        )
        out = render(avatar, pose, nets, cam)
        assets.save_image(outdir / f"orbit_{i:04d}.png", mode_image(out, args.mode))
    print(f"orbit: {args.frames} frames -> {outdir}")
    return 0


# -- bench -----------------------------------------------------------------------


def random_splat_scene(n, size, seed=0):
    """Synthetic screen-space scene: n gaussians spread over the viewport.

    Splat footprints follow the production regime: at this count a
    subdivided avatar's faces project to roughly pixel scale, so the
    sigmas sit near one pixel with a lognormal spread.
    """
    rng = np.random.default_rng(seed)
    means = rng.random((n, 2)) * size
    # ~60k px^2 of subject spread over n faces; the anti-aliasing floor on
    # the screen covariance dominates once sigma drops below a pixel.
    base = max(np.sqrt(60_000.0 / max(n, 1)), 0.35) * (size / 512.0)
    sig = np.exp(rng.standard_normal(n) * 0.3) * base
    rho = (rng.random(n) * 2 - 1) * 0.5
    cov = np.zeros((n, 2, 2))
    cov[:, 0, 0] = sig**2
    cov[:, 1, 1] = (sig * np.exp(rng.standard_normal(n) * 0.3)) ** 2
    cov[:, 0, 1] = cov[:, 1, 0] = rho * np.sqrt(cov[:, 0, 0] * cov[:, 1, 1])
    depth = rng.random(n) * 4.0 + 0.5
    colors = rng.random((n, 3))
    from .splat import Splats

    return Splats(Tensor(means), Tensor(cov), Tensor(colors), depth)


def bench_rasterize(n, size, warmup, runs, seed=0):
    scene = random_splat_scene(n, size, seed)
    times = []
    for i in range(warmup + runs):
        t0 = time.perf_counter()
        rasterize(scene, size, size)
        dt = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            times.append(dt)
    times = np.asarray(times)
    return float(np.median(times)), float(np.percentile(times, 95))


def bench_articulation(vertices, joints, warmup, runs, seed=0):
    rng = np.random.default_rng(seed)
    avatar = assets.make_test_rig(joints=joints, segments=max(joints, 16), radial=12)
    reps = int(np.ceil(vertices / avatar.vertex_count))
    avatar.positions = np.tile(avatar.positions, (reps, 1))[:vertices]
    avatar.weights = np.tile(avatar.weights, (reps, 1))[:vertices]
    pose = Pose(rng.standard_normal((joints, 3)) * 0.2, rng.standard_normal(3) * 0.1)
    times = []
    for i in range(warmup + runs):
        t0 = time.perf_counter()
        skin_only(avatar, pose)
        dt = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            times.append(dt)
    times = np.asarray(times)
    return float(np.median(times)), float(np.percentile(times, 95))


def cmd_bench(args):
    med, p95 = bench_rasterize(args.gaussians, args.size, args.warmup, args.runs,
                               args.seed)
    record = {
        "gaussian_count": args.gaussians,
        "size": args.size,
        "ms_per_frame": round(med, 3),
        "ms_p95": round(p95, 3),
        "fps": round(1000.0 / med, 2) if med > 0 else float("inf"),
    }
    if args.articulate_vertices > 0:
        amed, ap95 = bench_articulation(
            args.articulate_vertices, args.joints, args.warmup, args.runs, args.seed
        )
        record.update(
            {
                "articulate_vertices": args.articulate_vertices,
                "joints": args.joints,
                "articulate_ms": round(amed, 3),
                "articulate_ms_p95": round(ap95, 3),
            }
        )
    print(" ".join(f"{k}={v}" for k, v in record.items()))
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args):
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    names = sorted(
        p.name for p in pred_dir.glob("*.png") if not p.name.startswith("mask_")
    )
    if not names:
        print("eval: no .png files in prediction directory", file=sys.stderr)
        return 1
    psnrs, ssims, ious = [], [], []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            print(f"eval: missing ground truth for {name}", file=sys.stderr)
            return 1
        pred = assets.load_image(pred_dir / name)
        gt = assets.load_image(gt_path)
        p, s = metrics.image_metrics(pred, gt)
        psnrs.append(p)
        ssims.append(s)
        mask_name = f"mask_{name}"
        if (pred_dir / mask_name).exists() and (gt_dir / mask_name).exists():
            ious.append(
                metrics.mask_iou(
                    assets.load_mask(pred_dir / mask_name),
                    assets.load_mask(gt_dir / mask_name),
                )
            )
    report = metrics.MetricReport(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        mask_iou=float(np.mean(ious)) if ious else None,
    )
    sys.stdout.write(report.as_text())
    return 0


# -- misc ------------------------------------------------------------------------


def cmd_subdivide(args):
    avatar, nets = assets.load_avatar(args.input)
    assets.save_avatar(subdivide(avatar), nets, args.output)
    print(f"subdivide: -> {args.output}")
    return 0


def cmd_info(args):
    avatar, nets = assets.load_avatar(args.avatar)
    print(f"vertices: {avatar.vertex_count}")
    print(f"faces: {avatar.face_count}")
    print(f"joints: {avatar.rig.joint_count}")
    print(f"subdivision_level: {avatar.subdivision_level}")
    print(f"eps: {avatar.normal_eps:g}")
    present = [
        name
        for name in ("nr_deformer", "pose_refiner", "shading")
        if getattr(nets, name) is not None
    ]
    print(f"networks: {', '.join(present) if present else 'none'}")
    report = validate(avatar)
    print(f"validation: {'ok' if report.ok else report}")
    return 0


def cmd_serve(args):
    from .service import serve_session

    host, _, port = args.bind.rpartition(":")
    try:
        port = int(port)
    except ValueError:
        print(f"serve: bad bind address {args.bind!r}", file=sys.stderr)
        return 1
    serve_session(args.avatar, host or "127.0.0.1", port)
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "render": cmd_render,
    "orbit": cmd_orbit,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "subdivide": cmd_subdivide,
    "info": cmd_info,
    "serve": cmd_serve,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, DataError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
