"""Field training from posed images, and the pose-label bootstrap loop.

``train_field`` fits an MLP field to posed RGB frames by Adam on the mean
squared photometric residual of randomly sampled rays, rendered with
stratified quadrature.  ``self_supervise`` runs the three-stage loop:
train on the labeled subset, estimate poses for unlabeled images against
that field, then retrain from scratch on the union with the estimated
poses standing in as labels.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field, replace
from typing import NamedTuple

import numpy as np

from .fields import MLPField
from .pose_opt import DivergedError, EstimatorConfig, estimate_pose, photometric_loss
from .render import Camera, RenderConfig, camera_rays, render_image, render_rays_tape
from .se3 import Pose, pose_errors


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PosedDataset:
    """Images with known camera-to-world poses, sharing one camera."""

    camera: Camera
    images: list
    poses: list

    def __post_init__(self):
        if len(self.images) != len(self.poses):
            raise ValueError("images and poses must be parallel lists")
        for img in self.images:
            if img.shape[:2] != (self.camera.height, self.camera.width):
                raise ValueError("image dimensions do not match the camera")
        for pose in self.poses:
            pose.validate(tol=1e-6)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "PosedDataset":
        return PosedDataset(
            camera=self.camera,
            images=[self.images[i] for i in indices],
            poses=[self.poses[i] for i in indices],
        )


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2500
    rays_per_batch: int = 1024
    lr: float = 5e-3
    lr_decay: float = 0.1  # multiplier reached at the final iteration
    seed: int = 0
    hidden: int = 64
    color_hidden: int = 32
    n_freqs_pos: int = 6
    n_freqs_dir: int = 2
    dtype: str = "float32"
    render: RenderConfig = dataclass_field(
        default_factory=lambda: RenderConfig(n_samples=48, stratified=True)
    )

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_batch < 1:
            raise ValueError("iteration and batch counts must be positive")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("need lr > 0 and 0 < lr_decay <= 1")


class TrainResult(NamedTuple):
    field: MLPField
    losses: np.ndarray


def _flatten_rays(dataset: PosedDataset):
    origins, dirs, colors = [], [], []
    grid = dataset.camera.pixel_grid()
    for image, pose in zip(dataset.images, dataset.poses):
        o, d = camera_rays(dataset.camera, pose, grid)
        origins.append(o)
        dirs.append(d)
        colors.append(np.asarray(image, dtype=float).reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors)


def train_field(dataset: PosedDataset, config: TrainConfig) -> TrainResult:
    """Fit a fresh MLP field to the dataset; returns the field and the
    per-iteration loss curve.  Fully deterministic for a fixed seed."""
    if len(dataset) < 2:
        raise ValueError("need at least 2 posed frames to train")
    rng = np.random.default_rng(config.seed)
    model = MLPField.create(
        rng,
        hidden=config.hidden,
        color_hidden=config.color_hidden,
        n_freqs_pos=config.n_freqs_pos,
        n_freqs_dir=config.n_freqs_dir,
        dtype=np.dtype(config.dtype),
    )
    origins, dirs, colors = _flatten_rays(dataset)
    total = origins.shape[0]
    batch = min(config.rays_per_batch, total)
    adam_m = {k: {"w": np.zeros_like(v["w"]), "b": np.zeros_like(v["b"])} for k, v in model.params.items()}
    adam_v = {k: {"w": np.zeros_like(v["w"]), "b": np.zeros_like(v["b"])} for k, v in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    near, far = dataset.camera.near, dataset.camera.far
    losses = np.empty(config.iterations)
    for it in range(config.iterations):
        idx = rng.choice(total, size=batch, replace=False)
        rendered, tape = render_rays_tape(
            model, origins[idx], dirs[idx], config.render, near, far, rng
        )
        loss, dl_dc = photometric_loss(rendered, colors[idx], "rgb")
        if not np.isfinite(loss):
            raise TrainingDivergedError(it)
        losses[it] = loss
        grads = tape.param_grads(dl_dc)
        lr = config.lr * config.lr_decay ** (it / config.iterations)
        t = it + 1
        bias1 = 1.0 - beta1**t
        bias2 = 1.0 - beta2**t
        for name, leaves in model.params.items():
            for part in ("w", "b"):
                g = grads[name][part]
                m = adam_m[name][part]
                v = adam_v[name][part]
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                leaves[part] -= (lr / bias1) * m / (np.sqrt(v / bias2) + eps)
    return TrainResult(model, losses)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; +inf when equal."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _mean_eval_psnr(model, camera: Camera, eval_frames, render_config: RenderConfig,
                    threads: int = 1) -> float:
    values = []
    cfg = replace(render_config, stratified=False)
    for image, pose in eval_frames:
        rendered = render_image(model, camera, pose, cfg, threads=threads)
        values.append(psnr(rendered, np.asarray(image, dtype=float)))
    return float(np.mean(values))


def _nearest_labeled_pose(image: np.ndarray, dataset: PosedDataset) -> Pose:
    """Pose of the labeled view most similar to the image (smallest MSE)."""
    target = np.asarray(image, dtype=float)
    errors = [float(np.mean((target - np.asarray(img, dtype=float)) ** 2)) for img in dataset.images]
    return dataset.poses[int(np.argmin(errors))]


class SelfSuperviseResult(NamedTuple):
    field: MLPField
    estimated_poses: list
    report: dict


def self_supervise(
    labeled: PosedDataset,
    unlabeled_images,
    train_config: TrainConfig,
    estimate_config: EstimatorConfig,
    eval_frames=None,
    unlabeled_true_poses=None,
    threads: int = 1,
) -> SelfSuperviseResult:
    """Three-stage pose-label bootstrap.

    1. Train a field on the labeled frames.
    2. Estimate a pose for each unlabeled image against that field,
       initialized from the labeled view with the smallest image MSE.
    3. Retrain from scratch on labeled + pseudo-labeled frames.

    The report carries mean eval PSNR for the labeled-only and retrained
    models, and, when true poses are supplied for evaluation, for a
    fully-labeled reference model along with per-image pose-label errors.
    Per-image estimation jobs are independent and may run concurrently;
    results are deterministic either way.
    """
    if len(labeled) == 0:
        raise ValueError("labeled fraction must be nonempty")
    unlabeled_images = list(unlabeled_images)
    report: dict = {"stages": {}}

    t0 = time.time()
    labeled_result = train_field(labeled, train_config)
    report["stages"]["train_labeled_sec"] = time.time() - t0

    t0 = time.time()
    seed_seq = np.random.SeedSequence([train_config.seed, len(unlabeled_images)])
    child_seeds = seed_seq.spawn(max(len(unlabeled_images), 1))

    def estimate_one(i):
        image = unlabeled_images[i]
        init = _nearest_labeled_pose(image, labeled)
        rng = np.random.default_rng(child_seeds[i])
        try:
            pose, _ = estimate_pose(
                labeled_result.field, labeled.camera, np.asarray(image, dtype=float),
                init, estimate_config, rng,
            )
            return pose, False
        except DivergedError:
            return init, True  # fall back to the initialization as the label

    if unlabeled_images:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(estimate_one, range(len(unlabeled_images))))
        else:
            outcomes = [estimate_one(i) for i in range(len(unlabeled_images))]
        estimated_poses = [pose for pose, _ in outcomes]
        report["estimation_diverged"] = [bool(d) for _, d in outcomes]
    else:
        estimated_poses = []
        report["estimation_diverged"] = []
    report["stages"]["estimate_poses_sec"] = time.time() - t0

    t0 = time.time()
    union = PosedDataset(
        camera=labeled.camera,
        images=list(labeled.images) + unlabeled_images,
        poses=list(labeled.poses) + estimated_poses,
    )
    semi_result = train_field(union, train_config)
    report["stages"]["retrain_sec"] = time.time() - t0

    if unlabeled_true_poses is not None:
        errors = [
            pose_errors(est, true) for est, true in zip(estimated_poses, unlabeled_true_poses)
        ]
        report["pose_label_errors"] = [
            {"rotation_deg": r, "translation": t} for r, t in errors
        ]
        t0 = time.time()
        full = PosedDataset(
            camera=labeled.camera,
            images=list(labeled.images) + unlabeled_images,
            poses=list(labeled.poses) + list(unlabeled_true_poses),
        )
        full_result = train_field(full, train_config)
        report["stages"]["train_fully_labeled_sec"] = time.time() - t0
    else:
        full_result = None

    if eval_frames is not None:
        report["psnr_labeled_only"] = _mean_eval_psnr(
            labeled_result.field, labeled.camera, eval_frames, train_config.render, threads
        )
        report["psnr_with_estimated"] = _mean_eval_psnr(
            semi_result.field, labeled.camera, eval_frames, train_config.render, threads
        )
        if full_result is not None:
            report["psnr_fully_labeled"] = _mean_eval_psnr(
                full_result.field, labeled.camera, eval_frames, train_config.render, threads
            )
    return SelfSuperviseResult(semi_result.field, estimated_poses, report)
