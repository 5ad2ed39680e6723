"""Command-line interface.

Subcommands: ``generate`` (render a synthetic dataset), ``train`` (fit a
field to a dataset), ``estimate`` (recover one camera pose), ``benchmark``
(perturbation trials with success curves), ``selfsup`` (pose-label
bootstrap), ``render`` (single frame).

Every subcommand takes ``--seed``, ``--threads``, and ``--config FILE``;
the config file is a flat JSON object whose keys fill in any flag not
given on the command line.  Commands write their artifacts into a run
directory together with a ``manifest.json`` echoing the configuration,
seeds, library versions, and wall-clock time.

Exit codes: 0 success, 2 invalid arguments, 3 load failure, 4 divergence
(partial trajectory still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .bench import BenchScene, TrialSpec, run_benchmark
from .dataset import (
    generate_dataset,
    load_camera_json,
    load_dataset,
    load_pose_json,
    read_png,
    save_camera_json,
    save_pose_json,
    write_png,
)
from .pose_opt import DivergedError, EstimatorConfig, estimate_pose, write_trajectory_csv
from .render import RenderConfig, render_image
from .scenes import BUILTIN_SCENES, default_camera, hemisphere_poses, resolve_scene
from .se3 import pose_errors
from .trainer import PosedDataset, TrainConfig, TrainingDivergedError, self_supervise, train_field

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_LOAD = 3
EXIT_DIVERGED = 4


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None, help="master random seed")
    sub.add_argument("--threads", type=int, default=None, help="worker threads")
    sub.add_argument("--config", type=str, default=None,
                     help="JSON file supplying defaults for unset flags")


COMMON_DEFAULTS = {"seed": 0, "threads": 1}

DEFAULTS = {
    "generate": {
        "scene": "desk", "views": 16, "size": 100, "radius": 1.3,
        "n_samples": 64, **COMMON_DEFAULTS,
    },
    "train": {
        "iterations": 2000, "rays": 1024, "lr": 2e-3, "lr_decay": 0.1,
        "n_samples": 48, **COMMON_DEFAULTS,
    },
    "estimate": {
        "batch_size": 2048, "max_steps": 300, "strategy": "interest_region",
        "loss_mode": "rgb", "n_samples": 64, "lr0": 0.01, "render_every": 0,
        "gt_pose": None, "camera": None, **COMMON_DEFAULTS,
    },
    "benchmark": {
        "scene": "desk", "trials": 20, "views": 5, "size": 100,
        "rot_limit": 20.0, "trans_limit": 0.1, "batch_size": 2048,
        "strategy": "interest_region", "max_steps": 300, "n_samples": 64,
        "log_every": 10, **COMMON_DEFAULTS,
    },
    "selfsup": {
        "iterations": 2000, "rays": 1024, "lr": 2e-3, "lr_decay": 0.1,
        "train_samples": 48, "batch_size": 1024, "max_steps": 200,
        "strategy": "interest_region", "n_samples": 32, **COMMON_DEFAULTS,
    },
    "render": {
        "camera": None, "size": 100, "n_samples": 128, "stratified": False,
        **COMMON_DEFAULTS,
    },
}


def _merge_config(args: argparse.Namespace, command: str) -> argparse.Namespace:
    """Fill unset flags from --config, then from the defaults table."""
    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise SystemExit(f"cannot read config {args.config}: {err}")
    for key, default in DEFAULTS[command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, file_values.get(key, default))
    return args


def _write_manifest(run_dir, command, args, t_start) -> None:
    echo = {
        k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None
    }
    manifest = {
        "command": command,
        "config": echo,
        "versions": {
            "nerfpose": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "wall_clock_sec": time.time() - t_start,
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)


def cmd_generate(args) -> int:
    t0 = time.time()
    try:
        field = resolve_scene(args.scene)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_LOAD
    camera = default_camera(args.size)
    poses = hemisphere_poses(args.views, radius=args.radius)
    cfg = RenderConfig(n_samples=args.n_samples)
    os.makedirs(args.out, exist_ok=True)
    generate_dataset(field, camera, poses, args.out, cfg, threads=args.threads)
    save_camera_json(os.path.join(args.out, "camera.json"), camera)
    _write_manifest(args.out, "generate", args, t0)
    print(f"wrote {args.views} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.time()
    try:
        dataset = load_dataset(args.data)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_LOAD
    os.makedirs(args.out, exist_ok=True)
    cfg = TrainConfig(
        iterations=args.iterations, rays_per_batch=args.rays, lr=args.lr,
        lr_decay=args.lr_decay, seed=args.seed,
        render=RenderConfig(n_samples=args.n_samples, stratified=True),
    )
    try:
        result = train_field(dataset, cfg)
    except TrainingDivergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    field_path = os.path.join(args.out, "field.nrf")
    result.field.save(field_path)
    np.savetxt(os.path.join(args.out, "losses.csv"), result.losses,
               header="loss", comments="")
    _write_manifest(args.out, "train", args, t0)
    print(f"trained field -> {field_path} (final loss {result.losses[-50:].mean():.5f})")
    return EXIT_OK


def _camera_for_estimate(args):
    if args.camera:
        return load_camera_json(args.camera)
    raise ValueError("--camera is required")


def cmd_estimate(args) -> int:
    t0 = time.time()
    try:
        field = resolve_scene(args.scene)
        camera = _camera_for_estimate(args)
        image = read_png(args.image)
        init_pose = load_pose_json(args.init)
        gt = load_pose_json(args.gt_pose) if args.gt_pose else None
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_LOAD
    if image.shape[:2] != (camera.height, camera.width):
        print("error: image dimensions do not match the camera", file=sys.stderr)
        return EXIT_LOAD
    os.makedirs(args.out, exist_ok=True)
    config = EstimatorConfig(
        batch_size=args.batch_size, max_steps=args.max_steps, strategy=args.strategy,
        loss_mode=args.loss_mode, lr0=args.lr0,
        render=RenderConfig(n_samples=args.n_samples),
    )
    rng = np.random.default_rng(args.seed)
    code = EXIT_OK
    try:
        pose, trajectory = estimate_pose(field, camera, image, init_pose, config, rng)
    except DivergedError as err:
        trajectory = err.trajectory
        pose = trajectory[-1].pose if trajectory else init_pose
        code = EXIT_DIVERGED
        print(f"warning: {err}; writing partial trajectory", file=sys.stderr)
    save_pose_json(os.path.join(args.out, "pose.json"), pose)
    write_trajectory_csv(os.path.join(args.out, "trajectory.csv"), trajectory, gt_pose=gt)
    if args.render_every > 0:
        for point in trajectory:
            if point.step % args.render_every == 0 or point is trajectory[-1]:
                frame = render_image(field, camera, point.pose, config.render,
                                     threads=args.threads)
                write_png(os.path.join(args.out, f"step_{point.step:04d}.png"), frame)
    if gt is not None and trajectory:
        rot, trans = pose_errors(pose, gt)
        print(f"final errors: rotation {rot:.3f} deg, translation {trans:.5f}")
    _write_manifest(args.out, "estimate", args, t0)
    return code


def cmd_benchmark(args) -> int:
    t0 = time.time()
    try:
        field = resolve_scene(args.scene)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_LOAD
    camera = default_camera(args.size)
    scene = BenchScene(field=field, camera=camera,
                       render=RenderConfig(n_samples=args.n_samples))
    views = hemisphere_poses(args.views)
    trial_seeds = np.random.SeedSequence(args.seed).generate_state(args.trials)
    specs = [
        TrialSpec(
            scene_id="scene", gt_pose=views[i % len(views)],
            rot_limit_deg=args.rot_limit, trans_limit=args.trans_limit,
            strategy=args.strategy, batch_size=args.batch_size,
            seed=int(trial_seeds[i]),
        )
        for i in range(args.trials)
    ]
    config = EstimatorConfig(
        batch_size=args.batch_size, max_steps=args.max_steps, strategy=args.strategy,
        render=RenderConfig(n_samples=args.n_samples),
    )
    report = run_benchmark(specs, {"scene": scene}, config,
                           log_every=args.log_every, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    report.write_json(os.path.join(args.out, "report.json"))
    report.write_csv(os.path.join(args.out, "trials.csv"))
    _write_manifest(args.out, "benchmark", args, t0)
    print(f"final joint success: {report.final_success_fraction():.2f} "
          f"({len(specs)} trials)")
    return EXIT_OK


def cmd_selfsup(args) -> int:
    t0 = time.time()
    try:
        dataset = load_dataset(args.data)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_LOAD
    n = len(dataset)
    if n < 8:
        print("error: need at least 8 frames for the split", file=sys.stderr)
        return EXIT_LOAD
    # striped split: labeled = even, unlabeled = 1 mod 4, eval = 3 mod 4
    labeled_idx = [i for i in range(n) if i % 2 == 0]
    unlabeled_idx = [i for i in range(n) if i % 4 == 1]
    eval_idx = [i for i in range(n) if i % 4 == 3]
    labeled = dataset.subset(labeled_idx)
    train_cfg = TrainConfig(
        iterations=args.iterations, rays_per_batch=args.rays, lr=args.lr,
        lr_decay=args.lr_decay, seed=args.seed,
        render=RenderConfig(n_samples=args.train_samples, stratified=True),
    )
    est_cfg = EstimatorConfig(
        batch_size=args.batch_size, max_steps=args.max_steps, strategy=args.strategy,
        render=RenderConfig(n_samples=args.n_samples),
    )
    result = self_supervise(
        labeled,
        [dataset.images[i] for i in unlabeled_idx],
        train_cfg,
        est_cfg,
        eval_frames=[(dataset.images[i], dataset.poses[i]) for i in eval_idx],
        unlabeled_true_poses=[dataset.poses[i] for i in unlabeled_idx],
        threads=args.threads,
    )
    os.makedirs(args.out, exist_ok=True)
    result.field.save(os.path.join(args.out, "field_selfsup.nrf"))
    for i, pose in zip(unlabeled_idx, result.estimated_poses):
        save_pose_json(os.path.join(args.out, f"pose_{i:03d}.json"), pose)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(result.report, fh, indent=1, default=float)
    _write_manifest(args.out, "selfsup", args, t0)
    print(
        "psnr labeled-only {:.2f} | with estimated {:.2f} | fully labeled {:.2f}".format(
            result.report["psnr_labeled_only"],
            result.report["psnr_with_estimated"],
            result.report["psnr_fully_labeled"],
        )
    )
    return EXIT_OK


def cmd_render(args) -> int:
    t0 = time.time()
    try:
        field = resolve_scene(args.scene)
        camera = load_camera_json(args.camera) if args.camera else default_camera(args.size)
        pose = load_pose_json(args.pose)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_LOAD
    cfg = RenderConfig(n_samples=args.n_samples, stratified=args.stratified)
    rng = np.random.default_rng(args.seed) if args.stratified else None
    image = render_image(field, camera, pose, cfg, rng=rng, threads=args.threads)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_png(args.out, image)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nerfpose",
        description="Pose estimation by inverting a differentiable radiance field",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="render a synthetic posed dataset")
    p.add_argument("--scene", type=str, default=None,
                   help=f"builtin ({', '.join(BUILTIN_SCENES)}), scene JSON, or field file")
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--out", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("train", help="train a field on a posed dataset")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--rays", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-decay", dest="lr_decay", type=float, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("estimate", help="estimate the camera pose of one image")
    p.add_argument("--scene", type=str, required=True,
                   help="builtin scene, scene JSON, or trained field file")
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--camera", type=str, default=None, help="camera JSON file")
    p.add_argument("--init", type=str, required=True, help="initial pose JSON")
    p.add_argument("--gt-pose", dest="gt_pose", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--strategy", type=str, default=None,
                   choices=["random", "interest_point", "interest_region"])
    p.add_argument("--loss-mode", dest="loss_mode", type=str, default=None,
                   choices=["rgb", "yuv_uv"])
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--render-every", dest="render_every", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = subs.add_parser("benchmark", help="perturbation-recovery trials")
    p.add_argument("--scene", type=str, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--rot-limit", dest="rot_limit", type=float, default=None)
    p.add_argument("--trans-limit", dest="trans_limit", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--strategy", type=str, default=None,
                   choices=["random", "interest_point", "interest_region"])
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=None)
    p.add_argument("--out", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_benchmark)

    p = subs.add_parser("selfsup", help="pose-label bootstrap on a posed dataset")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--rays", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-decay", dest="lr_decay", type=float, default=None)
    p.add_argument("--train-samples", dest="train_samples", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--strategy", type=str, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_selfsup)

    p = subs.add_parser("render", help="render one frame from a field")
    p.add_argument("--scene", type=str, required=True)
    p.add_argument("--pose", type=str, required=True)
    p.add_argument("--camera", type=str, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=None)
    p.add_argument("--stratified", action="store_true", default=None)
    p.add_argument("--out", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _merge_config(args, args.command)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
