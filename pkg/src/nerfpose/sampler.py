"""Pixel selection for each optimization step.

Three strategies decide which rays see the loss:

* ``random`` -- uniform pixels without replacement.
* ``interest_point`` -- uniform over Harris corner detections, falling back
  to random pixels when too few corners exist.
* ``interest_region`` -- uniform over a mask grown from the detections by
  repeated 5x5 morphological dilation; with enough iterations the mask
  saturates and the strategy degenerates to random sampling.

Detection runs on the observed image only (never on renders) and is cached
by ``BatchSampler`` for the lifetime of an optimization, since the observed
image never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "interest_point", "interest_region")

_HARRIS_K = 0.04
_RESPONSE_FRACTION = 0.01  # threshold relative to the maximum response
_MIN_IMAGE_SIDE = 16


@dataclass(frozen=True)
class PixelBatch:
    """Sampled (u, v) pixel coordinates with their observed colors."""

    pixels: np.ndarray  # (N, 2) int, columns (u, v)
    colors: np.ndarray  # (N, 3) float

    def __len__(self) -> int:
        return self.pixels.shape[0]


def _to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def _box3(a: np.ndarray) -> np.ndarray:
    """3x3 box sum with reflected borders."""
    p = np.pad(a, 1, mode="reflect")
    out = np.zeros_like(a)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += p[dy : dy + a.shape[0], dx : dx + a.shape[1]]
    return out


def harris_response(image: np.ndarray, k: float = _HARRIS_K) -> np.ndarray:
    """Corner response det(M) - k trace(M)^2 of the 3x3 structure tensor."""
    gray = _to_gray(image)
    p = np.pad(gray, 1, mode="reflect")
    # Sobel derivatives
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    ) / 8.0
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    ) / 8.0
    sxx = _box3(gx * gx)
    syy = _box3(gy * gy)
    sxy = _box3(gx * gy)
    return (sxx * syy - sxy * sxy) - k * (sxx + syy) ** 2


def detect_interest_points(image: np.ndarray) -> np.ndarray:
    """Corner locations as an (M, 2) array of (u, v), strongest first.

    Local maxima of the Harris response over 3x3 neighborhoods, keeping
    responses above 1% of the maximum.  A structureless image (zero
    gradients everywhere) yields an empty array; callers fall back to
    random sampling.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h < _MIN_IMAGE_SIDE or w < _MIN_IMAGE_SIDE:
        raise ValueError(f"image must be at least {_MIN_IMAGE_SIDE} pixels per side")
    r = harris_response(image)
    r_max = r.max()
    if r_max <= 1e-12:
        return np.zeros((0, 2), dtype=int)
    p = np.pad(r, 1, mode="constant", constant_values=-np.inf)
    neighborhood_max = np.max(
        [p[dy : dy + h, dx : dx + w] for dy in (0, 1, 2) for dx in (0, 1, 2)], axis=0
    )
    keep = (r >= neighborhood_max) & (r > _RESPONSE_FRACTION * r_max)
    vs, us = np.nonzero(keep)
    order = np.lexsort((us, vs, -r[vs, us]))
    return np.stack([us[order], vs[order]], axis=1)


def dilate_mask(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Repeated 5x5 morphological dilation; zero iterations is the identity."""
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    out = np.asarray(mask, dtype=bool).copy()
    h, w = out.shape
    for _ in range(iterations):
        p = np.pad(out, 2, mode="constant", constant_values=False)
        acc = np.zeros_like(out)
        for dy in range(5):
            for dx in range(5):
                acc |= p[dy : dy + h, dx : dx + w]
        out = acc
    return out


def points_mask(shape: tuple[int, int], points: np.ndarray) -> np.ndarray:
    """Boolean H x W grid that is True at the given (u, v) points."""
    mask = np.zeros(shape, dtype=bool)
    if len(points):
        mask[points[:, 1], points[:, 0]] = True
    return mask


def default_dilation_iters(budget: int) -> int:
    """Mask growth chosen so typical desk-scale masks cover ~10-25% of
    a 100x100 image: more iterations for larger ray budgets."""
    return 3 if budget <= 1024 else 5


class BatchSampler:
    """Caches detection work for one observed image and draws batches.

    Interest points are found once at construction; the candidate pixel
    set for the chosen strategy is fixed thereafter.  Draws are pure
    functions of the passed generator, so fixed seeds reproduce batches
    exactly regardless of thread count.
    """

    def __init__(
        self,
        image: np.ndarray,
        strategy: str,
        dilation_iters: int | None = None,
        budget_hint: int = 1024,
    ):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.image = np.asarray(image, dtype=float)
        self.strategy = strategy
        h, w = self.image.shape[:2]
        self.shape = (h, w)
        self.dilation_iters = (
            default_dilation_iters(budget_hint) if dilation_iters is None else dilation_iters
        )
        if strategy == "random":
            self.candidates = np.array([], dtype=np.int64)
        else:
            points = detect_interest_points(self.image)
            mask = points_mask((h, w), points)
            if strategy == "interest_region":
                mask = dilate_mask(mask, self.dilation_iters)
            self.candidates = np.flatnonzero(mask.ravel())

    def sample(self, budget: int, rng: np.random.Generator) -> PixelBatch:
        h, w = self.shape
        n_total = h * w
        if budget < 1:
            raise ValueError("ray budget must be at least 1")
        if budget > n_total:
            raise ValueError(f"ray budget {budget} exceeds pixel count {n_total}")
        cand = self.candidates
        if self.strategy == "random" or len(cand) == 0:
            idx = rng.choice(n_total, size=budget, replace=False)
        elif len(cand) >= budget:
            idx = rng.choice(cand, size=budget, replace=False)
        else:
            # not enough candidates: take them all, fill the rest randomly
            rest = np.setdiff1d(np.arange(n_total), cand, assume_unique=False)
            fill = rng.choice(rest, size=budget - len(cand), replace=False)
            idx = np.concatenate([cand, fill])
        us = idx % w
        vs = idx // w
        pixels = np.stack([us, vs], axis=1).astype(int)
        colors = self.image[vs, us]
        if colors.ndim == 1:
            colors = np.repeat(colors[:, None], 3, axis=1)
        return PixelBatch(pixels=pixels, colors=np.array(colors, dtype=float))


def sample_batch(
    strategy: str,
    image: np.ndarray,
    budget: int,
    rng: np.random.Generator,
    dilation_iters: int | None = None,
) -> PixelBatch:
    """One-shot batch draw; see BatchSampler for the cached variant."""
    return BatchSampler(image, strategy, dilation_iters, budget_hint=budget).sample(budget, rng)
