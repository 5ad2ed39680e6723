"""Gradient-descent pose estimation against a fixed radiance field.

Starting from an initial camera-to-world estimate T0, the current estimate
is parameterized as exp(xi) @ T0 with xi the 6-vector of exponential
coordinates.  Each step samples a pixel batch from the observed image,
renders the matching rays at the current pose, and backpropagates the
photometric loss through the renderer and the exponential map:

    ray direction  d = R v  (v: fixed unit camera-frame pixel direction)
    ray origin     o = t
    dL/dR = sum_rays g_d v^T,   dL/dt = sum_rays g_o
    dL/dxi = J_l(xi)^T vee( G E^T )   for E = exp(xi), G the 4x4 gradient
                                      of the loss in the entries of E,

where J_l is the analytic SE(3) left Jacobian (se3 module) and vee reads
off the antisymmetric rotation part and the translation column.  Updates
use Adam with bias correction on the 6 coordinates and an exponentially
decaying step size.

Because the increment multiplies on the left, every iterate is an exact
group element: estimates never leave the manifold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .render import Camera, RenderConfig, render_rays, render_rays_tape
from .sampler import BatchSampler, PixelBatch
from .se3 import Pose, exp_se3, pose_errors, se3_left_jacobian

# RGB -> YUV (BT.709 luma; analog U/V scaling).  The first row is
# luminance: chroma-only losses discard it to gain some illumination
# invariance.  Rows 2 and 3 each sum to zero, so any gray maps to U=V=0.
YUV_FROM_RGB = np.array(
    [
        [0.2126, 0.7152, 0.0722],
        [-0.09991, -0.33609, 0.436],
        [0.615, -0.55861, -0.05639],
    ]
)

LOSS_MODES = ("rgb", "yuv_uv")


class DivergedError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""

    def __init__(self, step: int, trajectory=None):
        super().__init__(f"pose optimization diverged at step {step}")
        self.step = step
        self.trajectory = trajectory if trajectory is not None else []


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of one pose-estimation run."""

    batch_size: int = 2048
    max_steps: int = 300
    strategy: str = "interest_region"
    loss_mode: str = "rgb"
    lr0: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_std: float = 1e-6
    conv_window: int = 20
    conv_tol: float = 1e-4
    # Stop once the batch loss is photometrically exact (RMS residual
    # ~1e-5 color units): Adam's scale-free steps only wander from there.
    loss_floor: float = 1e-10
    dilation_iters: int | None = None
    render: RenderConfig = field(default_factory=lambda: RenderConfig(n_samples=64))

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.init_std < 0:
            raise ValueError("initialization scale must be nonnegative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}")


@dataclass
class PoseEstimate:
    """Optimizer state: coordinates, their Adam moments, and history."""

    coords: np.ndarray
    base: Pose
    m: np.ndarray
    v: np.ndarray
    step: int
    loss_history: list

    @property
    def pose(self) -> Pose:
        """Current estimate exp(coords) @ base."""
        return exp_se3(self.coords).compose(self.base)


class TrajectoryPoint(NamedTuple):
    step: int
    coords: np.ndarray
    pose: Pose
    loss: float


def lr_schedule(step: int, lr0: float = 0.01) -> float:
    """Exponentially decaying step size: lr0 * 0.8^(step/100)."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    return lr0 * 0.8 ** (step / 100.0)


def photometric_loss(rendered: np.ndarray, observed: np.ndarray, mode: str = "rgb"):
    """Mean squared color residual over a batch, with its per-pixel gradient.

    ``rgb`` compares raw colors.  ``yuv_uv`` maps both sides to YUV and
    compares only the two chroma channels; the gradient maps back through
    the transpose with the luminance row zeroed.  Means (not sums) keep
    the step size independent of the batch size.
    """
    rendered = np.asarray(rendered, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if rendered.shape != observed.shape or rendered.ndim != 2 or rendered.shape[1] != 3:
        raise ValueError("rendered and observed must both be (N, 3)")
    n = rendered.shape[0]
    if n < 1:
        raise ValueError("need at least one pixel")
    if mode == "rgb":
        resid = rendered - observed
        return float(np.sum(resid**2) / n), 2.0 * resid / n
    if mode == "yuv_uv":
        uv = YUV_FROM_RGB[1:]
        resid_uv = (rendered - observed) @ uv.T
        return float(np.sum(resid_uv**2) / n), (2.0 * resid_uv / n) @ uv
    raise ValueError(f"loss mode must be one of {LOSS_MODES}")


def init_estimate(t0: Pose, rng: np.random.Generator, init_std: float = 1e-6) -> PoseEstimate:
    """Fresh optimizer state with coordinates drawn from N(0, init_std)."""
    t0.validate(tol=1e-6)
    coords = rng.normal(0.0, init_std, size=6) if init_std > 0 else np.zeros(6)
    return PoseEstimate(
        coords=coords, base=t0, m=np.zeros(6), v=np.zeros(6), step=0, loss_history=[]
    )


def _pixel_cam_dirs(camera: Camera, batch: PixelBatch) -> np.ndarray:
    return camera.pixel_directions(batch.pixels.astype(float))


def coords_loss_and_grad(field_model, camera: Camera, base: Pose, coords: np.ndarray,
                         batch: PixelBatch, config: EstimatorConfig):
    """Loss at exp(coords) @ base over one pixel batch, and dloss/dcoords.

    Deterministic given the batch (sampling is left to the caller), which
    makes the full 6-dim gradient directly checkable by finite differences.
    """
    pose = exp_se3(coords).compose(base)
    cam_dirs = _pixel_cam_dirs(camera, batch)
    dirs = cam_dirs @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    colors, tape = render_rays_tape(
        field_model, origins, dirs, config.render, camera.near, camera.far
    )
    loss, dl_dc = photometric_loss(colors, batch.colors, config.loss_mode)
    g_o, g_d = tape.input_grads(dl_dc)

    dl_drot = g_d.T @ cam_dirs  # sum of per-ray outer products g_d v^T
    dl_dt = g_o.sum(axis=0)
    # pose = E @ base: R = R_E R_0, t = R_E t_0 + t_E
    dl_dre = dl_drot @ base.rotation.T + np.outer(dl_dt, base.translation)
    g4 = np.zeros((4, 4))
    g4[:3, :3] = dl_dre
    g4[:3, 3] = dl_dt
    m = g4 @ exp_se3(coords).matrix().T
    g_body = np.array(
        [m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1], m[0, 3], m[1, 3], m[2, 3]]
    )
    grad = se3_left_jacobian(coords).T @ g_body
    return loss, grad, colors


def pose_step(estimate: PoseEstimate, field_model, camera: Camera, image: np.ndarray,
              config: EstimatorConfig, rng: np.random.Generator,
              sampler: BatchSampler | None = None) -> PoseEstimate:
    """One sample-render-backprop-update iteration; returns the new state."""
    if sampler is None:
        sampler = BatchSampler(
            image, config.strategy, config.dilation_iters, budget_hint=config.batch_size
        )
    batch = sampler.sample(config.batch_size, rng)
    loss, grad, _ = coords_loss_and_grad(
        field_model, camera, estimate.base, estimate.coords, batch, config
    )
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise DivergedError(estimate.step)
    t = estimate.step + 1
    m = config.beta1 * estimate.m + (1.0 - config.beta1) * grad
    v = config.beta2 * estimate.v + (1.0 - config.beta2) * grad**2
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    lr = lr_schedule(estimate.step, config.lr0)
    coords = estimate.coords - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return PoseEstimate(
        coords=coords,
        base=estimate.base,
        m=m,
        v=v,
        step=t,
        loss_history=estimate.loss_history + [loss],
    )


def _converged(history, window: int, tol: float) -> bool:
    if tol <= 0 or len(history) < 2 * window:
        return False
    recent = np.mean(history[-window:])
    previous = np.mean(history[-2 * window : -window])
    return abs(recent - previous) < tol * max(previous, 1e-12)


def estimate_pose(field_model, camera: Camera, image: np.ndarray, t0: Pose,
                  config: EstimatorConfig, rng: np.random.Generator):
    """Full optimization run: returns (final pose, trajectory).

    The trajectory holds one point per completed step (pose before the
    update, with the loss measured there) plus a final entry whose loss is
    evaluated on one extra sampled batch.  Runs until ``max_steps`` or
    until the windowed relative loss change drops below ``conv_tol``.
    On divergence the partial trajectory rides along with the error.
    """
    estimate = init_estimate(t0, rng, config.init_std)
    sampler = BatchSampler(
        image, config.strategy, config.dilation_iters, budget_hint=config.batch_size
    )
    trajectory: list[TrajectoryPoint] = []
    while estimate.step < config.max_steps:
        before = estimate
        try:
            stepped = pose_step(estimate, field_model, camera, image, config, rng, sampler)
        except DivergedError as err:
            raise DivergedError(err.step, trajectory) from None
        loss = stepped.loss_history[-1]
        trajectory.append(
            TrajectoryPoint(
                step=before.step,
                coords=before.coords.copy(),
                pose=before.pose,
                loss=loss,
            )
        )
        if loss < config.loss_floor:
            break  # keep the pre-update pose: it is already exact
        estimate = stepped
        if _converged(estimate.loss_history, config.conv_window, config.conv_tol):
            break
    final_batch = sampler.sample(config.batch_size, rng)
    pose = estimate.pose
    cam_dirs = _pixel_cam_dirs(camera, final_batch)
    dirs = cam_dirs @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    colors = render_rays(field_model, origins, dirs, config.render, camera.near, camera.far)
    final_loss, _ = photometric_loss(colors, final_batch.colors, config.loss_mode)
    trajectory.append(
        TrajectoryPoint(step=estimate.step, coords=estimate.coords.copy(),
                        pose=pose, loss=final_loss)
    )
    return pose, trajectory


def write_trajectory_csv(path, trajectory, gt_pose: Pose | None = None) -> None:
    """Flat per-step log; error columns appear when ground truth is known."""
    headers = ["step", "loss", "wx", "wy", "wz", "vx", "vy", "vz"]
    if gt_pose is not None:
        headers += ["rotation_error_deg", "translation_error"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for point in trajectory:
            row = [point.step, repr(point.loss)] + [repr(c) for c in point.coords]
            if gt_pose is not None:
                rot, trans = pose_errors(point.pose, gt_pose)
                row += [repr(rot), repr(trans)]
            writer.writerow(row)
