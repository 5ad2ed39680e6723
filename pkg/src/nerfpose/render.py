"""Pinhole camera rays and differentiable volume rendering.

A ray through pixel (u, v) of a camera with focal length f and principal
point (cx, cy) has camera-frame direction ((u - cx)/f, -(v - cy)/f, -1):
right-handed, looking down -z with y up, as in the synthetic-blender
convention.  World rays use the camera-to-world pose: origin is the pose
translation, direction the rotated (and normalized) camera-frame vector.

A pixel color is the emission-absorption quadrature over n samples

    C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_{n+1} background,
    T_i = exp(-sum_{j<i} sigma_j delta_j),

with sample positions x_i = origin + t_i * direction.  One sample lands in
each of n equal bins of [near, far]: at the midpoint when deterministic,
uniformly jittered within the bin when stratified.  delta_i = t_{i+1} - t_i
with t_{n+1} taken as far.

``render_rays_tape`` keeps enough state to backpropagate a loss gradient on
the output colors to the ray origin/direction (for pose optimization) or to
the field parameters (for training).  Field activations are not retained:
the backward pass re-runs the field forward in bounded chunks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .se3 import Pose

_CHUNK = 65536  # field-evaluation chunk, in samples
_CACHE_KEEP = 65536  # retain forward activations up to this many samples


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus the ray integration bounds."""

    width: int
    height: int
    focal: float
    near: float
    far: float
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    def pixel_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit camera-frame directions for (N, 2) pixel coordinates (u, v)."""
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[:, 0], pixels[:, 1]
        if np.any((u < 0) | (u > self.width - 1) | (v < 0) | (v > self.height - 1)):
            raise ValueError("pixel coordinates out of image bounds")
        dirs = np.stack(
            [(u - self.cx) / self.focal, -(v - self.cy) / self.focal, -np.ones_like(u)],
            axis=1,
        )
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def pixel_grid(self) -> np.ndarray:
        """All integer pixel coordinates, row-major: (H*W, 2) as (u, v)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 128
    stratified: bool = False
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")


def camera_ray(camera: Camera, pose: Pose, pixel) -> Ray:
    """World-space ray through one (u, v) pixel (continuous coordinates)."""
    d_cam = camera.pixel_directions(np.asarray(pixel, dtype=float)[None, :])[0]
    return Ray(
        origin=pose.translation.copy(),
        direction=pose.rotation @ d_cam,
        near=camera.near,
        far=camera.far,
    )


def camera_rays(camera: Camera, pose: Pose, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Batched origins/directions for an (N, 2) array of pixels."""
    d_cam = camera.pixel_directions(pixels)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def _sample_ts(near, far, n, stratified, rng, n_rays):
    """Sample positions (broadcastable to (n_rays, n)) and bin widths."""
    h = (far - near) / n
    edges = near + h * np.arange(n)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs a random generator")
        t = edges[None, :] + h * rng.random((n_rays, n))
        delta = np.concatenate([np.diff(t, axis=1), far - t[:, -1:]], axis=1)
    else:
        t = (edges + 0.5 * h)[None, :]
        delta = np.concatenate([np.full(n - 1, h), [0.5 * h]])[None, :]
    return t, delta


def _field_query_chunked(field, pts, dirs):
    """Evaluate the field over flattened samples in bounded chunks."""
    n = pts.shape[0]
    sigma = np.empty(n)
    color = np.empty((n, 3))
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        s, c = field.query(pts[lo:hi], dirs[lo:hi])
        sigma[lo:hi] = s
        color[lo:hi] = c
    return sigma, color


def _quadrature(sigma, color, delta, background):
    """Forward compositing; returns colors plus the pieces backward needs."""
    od = sigma * delta  # optical depth per bin
    acc = np.cumsum(od, axis=1)
    trans = np.exp(-(acc - od))  # T_i: transmittance to sample i
    alpha = -np.expm1(-od)
    weights = trans * alpha
    t_end = np.exp(-acc[:, -1])
    colors = np.einsum("bn,bnc->bc", weights, color) + t_end[:, None] * background
    return colors, weights, acc, t_end


class RenderTape:
    """Deferred backward pass for a batch of rendered rays."""

    def __init__(self, field, origins, dirs, dirs_unit, t, delta, sigma, color,
                 weights, acc, t_end, background, kept_cache=None):
        self.field = field
        self.origins = origins
        self.dirs = dirs
        self.dirs_unit = dirs_unit
        self.t = t
        self.delta = delta
        self.sigma = sigma
        self.color = color
        self.weights = weights
        self.acc = acc
        self.t_end = t_end
        self.background = background
        self.kept_cache = kept_cache  # forward activations, when small enough

    def _sample_upstream(self, dloss_dcolor):
        """Per-sample gradients (g_sigma, g_color) from a per-ray color grad."""
        g = np.asarray(dloss_dcolor, dtype=float)
        b, n = self.sigma.shape
        trans_next = np.exp(-self.acc)  # T_{i+1}
        contrib = self.weights[:, :, None] * self.color
        csum = np.cumsum(contrib, axis=1)
        suffix = csum[:, -1:, :] - csum + (self.t_end[:, None] * self.background)[:, None, :]
        inner = trans_next[:, :, None] * self.color - suffix
        g_sigma = self.delta * np.einsum("bc,bnc->bn", g, inner)
        g_color = self.weights[:, :, None] * g[:, None, :]
        return g_sigma, g_color

    def _field_vjp(self, g_sigma, g_color, want_inputs, want_params):
        """Chunked field backward; activations come from the retained forward
        cache when available, else the forward is re-run per chunk."""
        b, n = self.sigma.shape
        pts = (self.origins[:, None, :] + self.t[..., None] * self.dirs[:, None, :]).reshape(-1, 3)
        dirs_flat = np.broadcast_to(self.dirs_unit[:, None, :], (b, n, 3)).reshape(-1, 3)
        gs_flat = g_sigma.reshape(-1)
        gc_flat = g_color.reshape(-1, 3)
        g_pts = np.zeros((b * n, 3)) if want_inputs else None
        g_dirs = np.zeros((b * n, 3)) if want_inputs else None
        param_grads = None
        for lo in range(0, b * n, _CHUNK):
            hi = min(lo + _CHUNK, b * n)
            if self.kept_cache is not None and lo == 0 and hi == b * n:
                cache = self.kept_cache
            else:
                _, _, cache = self.field.forward_cached(pts[lo:hi], dirs_flat[lo:hi])
            if want_inputs:
                gx, gd = self.field.vjp_inputs(cache, gs_flat[lo:hi], gc_flat[lo:hi])
                g_pts[lo:hi] = gx
                g_dirs[lo:hi] = gd
            if want_params:
                grads = self.field.vjp_params(cache, gs_flat[lo:hi], gc_flat[lo:hi])
                if param_grads is None:
                    param_grads = grads
                else:
                    for name in grads:
                        param_grads[name]["w"] += grads[name]["w"]
                        param_grads[name]["b"] += grads[name]["b"]
        return g_pts, g_dirs, param_grads

    def input_grads(self, dloss_dcolor):
        """Gradients of the loss with respect to ray origins and directions.

        Positions are origin + t * direction with the raw direction; the
        direction fed to the field is normalized, so the color-path term
        goes through the normalization Jacobian.
        """
        g_sigma, g_color = self._sample_upstream(dloss_dcolor)
        b, n = self.sigma.shape
        g_pts, g_dirs, _ = self._field_vjp(g_sigma, g_color, True, False)
        g_pts = g_pts.reshape(b, n, 3)
        g_dirs = g_dirs.reshape(b, n, 3)
        g_origin = g_pts.sum(axis=1)
        g_direction = np.einsum("bn,bnc->bc", np.broadcast_to(self.t, (b, n)), g_pts)
        g_unit = g_dirs.sum(axis=1)
        # d(d/||d||)/dd = (I - u u^T)/||d||, applied to the unit-direction grad
        norms = np.linalg.norm(self.dirs, axis=1, keepdims=True)
        g_direction += (g_unit - self.dirs_unit * np.sum(g_unit * self.dirs_unit, axis=1, keepdims=True)) / norms
        return g_origin, g_direction

    def param_grads(self, dloss_dcolor):
        """Gradients of the loss with respect to the field parameters."""
        if not getattr(self.field, "has_params", False):
            raise ValueError("field has no trainable parameters")
        g_sigma, g_color = self._sample_upstream(dloss_dcolor)
        _, _, grads = self._field_vjp(g_sigma, g_color, False, True)
        return grads


def render_rays_tape(field, origins, dirs, config: RenderConfig, near, far, rng=None):
    """Render a batch of rays and return (colors, tape) for backprop."""
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    b = origins.shape[0]
    background = np.asarray(config.background, dtype=float)
    if b == 0:
        empty = np.zeros((0, 3))
        return empty, None
    t, delta = _sample_ts(near, far, config.n_samples, config.stratified, rng, b)
    n = config.n_samples
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    dirs_unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs_flat = np.broadcast_to(dirs_unit[:, None, :], (b, n, 3)).reshape(-1, 3)
    kept_cache = None
    if b * n <= _CACHE_KEEP and hasattr(field, "forward_cached"):
        sigma, color, kept_cache = field.forward_cached(pts, dirs_flat)
    else:
        sigma, color = _field_query_chunked(field, pts, dirs_flat)
    # widen once so compositing runs in float64 on either path
    sigma = np.asarray(sigma, dtype=float).reshape(b, n)
    color = np.asarray(color, dtype=float).reshape(b, n, 3)
    colors, weights, acc, t_end = _quadrature(sigma, color, delta, background)
    tape = RenderTape(field, origins, dirs, dirs_unit, t, delta, sigma, color,
                      weights, acc, t_end, background, kept_cache)
    return colors, tape


def render_rays(field, origins, dirs, config: RenderConfig, near, far, rng=None):
    colors, _ = render_rays_tape(field, origins, dirs, config, near, far, rng)
    return colors


def render_ray(field, ray: Ray, config: RenderConfig, rng=None) -> np.ndarray:
    """RGB estimate for a single ray."""
    return render_rays(
        field, ray.origin[None, :], ray.direction[None, :], config, ray.near, ray.far, rng
    )[0]


def render_ray_with_pose_grads(field, ray: Ray, config: RenderConfig, dloss_dcolor):
    """Single-ray color plus loss gradients w.r.t. the ray origin/direction."""
    colors, tape = render_rays_tape(
        field, ray.origin[None, :], ray.direction[None, :], config, ray.near, ray.far
    )
    g_o, g_d = tape.input_grads(np.asarray(dloss_dcolor, dtype=float)[None, :])
    return colors[0], g_o[0], g_d[0]


def render_pixels(field, camera: Camera, pose: Pose, pixels, config: RenderConfig,
                  rng=None, threads: int = 1) -> np.ndarray:
    """Render a batch of (u, v) pixels; output order matches input order.

    With ``threads > 1`` the batch is partitioned across a thread pool;
    per-pixel results are independent, so the output is identical to the
    single-threaded one whenever sampling is deterministic.
    """
    pixels = np.asarray(pixels)
    if pixels.shape[0] == 0:
        return np.zeros((0, 3))
    origins, dirs = camera_rays(camera, pose, pixels)
    if threads <= 1 or config.stratified or pixels.shape[0] < 256:
        return render_rays(field, origins, dirs, config, camera.near, camera.far, rng)
    bounds = np.linspace(0, pixels.shape[0], threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(
                lambda i: render_rays(
                    field, origins[bounds[i] : bounds[i + 1]], dirs[bounds[i] : bounds[i + 1]],
                    config, camera.near, camera.far,
                ),
                range(threads),
            )
        )
    return np.concatenate(parts, axis=0)


def render_image(field, camera: Camera, pose: Pose, config: RenderConfig,
                 rng=None, threads: int = 1) -> np.ndarray:
    """Full (H, W, 3) frame."""
    colors = render_pixels(field, camera, pose, camera.pixel_grid(), config, rng, threads)
    return colors.reshape(camera.height, camera.width, 3)
