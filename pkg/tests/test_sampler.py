import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfpose.sampler import (
    BatchSampler,
    PixelBatch,
    default_dilation_iters,
    detect_interest_points,
    dilate_mask,
    points_mask,
    sample_batch,
)


def square_image(size=64, lo=16, hi=36):
    img = np.zeros((size, size, 3))
    img[lo:hi, lo:hi] = 1.0
    return img


def brute_force_dilate(mask, iterations):
    """Set-based dilation oracle: a pixel is on iff any pixel within the
    5x5 Chebyshev neighborhood was on, repeated."""
    current = {(int(v), int(u)) for v, u in zip(*np.nonzero(mask))}
    h, w = mask.shape
    for _ in range(iterations):
        grown = set()
        for v, u in current:
            for dv in range(-2, 3):
                for du in range(-2, 3):
                    nv, nu = v + dv, u + du
                    if 0 <= nv < h and 0 <= nu < w:
                        grown.add((nv, nu))
        current = grown
    out = np.zeros_like(mask, dtype=bool)
    for v, u in current:
        out[v, u] = True
    return out


def brute_force_harris(image, k=0.04):
    """Loop-based corner response at interior pixels (reflect-padded)."""
    gray = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    p = np.pad(gray, 1, mode="reflect")
    h, w = gray.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    sob = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 8.0
    for y in range(h):
        for x in range(w):
            win = p[y : y + 3, x : x + 3]
            gx[y, x] = np.sum(win * sob)
            gy[y, x] = np.sum(win * sob.T)
    pxx = np.pad(gx * gx, 1, mode="reflect")
    pyy = np.pad(gy * gy, 1, mode="reflect")
    pxy = np.pad(gx * gy, 1, mode="reflect")
    resp = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            sxx = pxx[y : y + 3, x : x + 3].sum()
            syy = pyy[y : y + 3, x : x + 3].sum()
            sxy = pxy[y : y + 3, x : x + 3].sum()
            resp[y, x] = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    return resp


class TestDetect:
    def test_constant_image_gives_no_points(self):
        img = np.full((32, 32, 3), 0.5)
        assert len(detect_interest_points(img)) == 0

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            detect_interest_points(np.zeros((8, 32, 3)))

    def test_square_corners_in_top_detections(self):
        img = square_image()
        points = detect_interest_points(img)[:8]
        corners = [(16, 16), (35, 16), (16, 35), (35, 35)]
        for cu, cv in corners:
            dist = np.min(np.hypot(points[:, 0] - cu, points[:, 1] - cv))
            assert dist <= 1.5, f"corner ({cu},{cv}) not among top detections"

    def test_matches_brute_force_response(self):
        img = square_image(size=24, lo=6, hi=16)
        from nerfpose.sampler import harris_response

        assert np.allclose(harris_response(img), brute_force_harris(img), atol=1e-12)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 1, size=(48, 48, 3))
        img[10:20, 25:40] += 1.0
        img = np.clip(img, 0, 1)
        rot = np.rot90(img, axes=(0, 1)).copy()

        def interior(points, size, border=3):
            keep = (
                (points[:, 0] >= border)
                & (points[:, 0] < size - border)
                & (points[:, 1] >= border)
                & (points[:, 1] < size - border)
            )
            return points[keep]

        pts = interior(detect_interest_points(img), 48)
        pts_rot = interior(detect_interest_points(rot), 48)
        assert len(pts) == len(pts_rot)
        # np.rot90 maps (u, v) -> (v, W-1-u)
        mapped = {(int(v), int(48 - 1 - u)) for u, v in pts}
        got = {(int(u), int(v)) for u, v in pts_rot}
        assert mapped == got

    def test_sorted_by_response_descending(self):
        img = square_image()
        from nerfpose.sampler import harris_response

        points = detect_interest_points(img)
        r = harris_response(img)
        responses = r[points[:, 1], points[:, 0]]
        assert np.all(np.diff(responses) <= 1e-15)


class TestDilate:
    def test_single_pixel_one_iteration(self):
        mask = np.zeros((21, 21), dtype=bool)
        mask[10, 10] = True
        out = dilate_mask(mask, 1)
        expected = np.zeros_like(mask)
        expected[8:13, 8:13] = True
        assert np.array_equal(out, expected)

    def test_zero_iterations_identity(self):
        rng = np.random.default_rng(1)
        mask = rng.random((15, 17)) < 0.2
        assert np.array_equal(dilate_mask(mask, 0), mask)

    def test_two_iterations_9x9(self):
        mask = np.zeros((21, 21), dtype=bool)
        mask[10, 10] = True
        out = dilate_mask(mask, 2)
        expected = np.zeros_like(mask)
        expected[6:15, 6:15] = True
        assert np.array_equal(out, expected)

    def test_output_superset_of_input(self):
        rng = np.random.default_rng(2)
        mask = rng.random((20, 20)) < 0.1
        out = dilate_mask(mask, 3)
        assert np.all(out[mask])

    def test_against_brute_force_random_masks(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            h, w = rng.integers(5, 18, size=2)
            mask = rng.random((h, w)) < 0.15
            iters = int(rng.integers(0, 4))
            assert np.array_equal(dilate_mask(mask, iters), brute_force_dilate(mask, iters))

    def test_negative_iterations_rejected(self):
        with pytest.raises(ValueError):
            dilate_mask(np.zeros((4, 4), dtype=bool), -1)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_no_duplicates_property(seed):
    rng = np.random.default_rng(seed)
    img = square_image(32, 8, 20)
    strategy = ["random", "interest_point", "interest_region"][seed % 3]
    batch = sample_batch(strategy, img, 200, rng)
    flat = batch.pixels[:, 1] * 32 + batch.pixels[:, 0]
    assert len(np.unique(flat)) == len(flat)


class TestSampleBatch:
    def test_exhaustive_random(self):
        img = np.zeros((16, 16, 3))
        batch = sample_batch("random", img, 256, np.random.default_rng(0))
        flat = batch.pixels[:, 1] * 16 + batch.pixels[:, 0]
        assert sorted(flat.tolist()) == list(range(256))

    def test_budget_too_large_rejected(self):
        img = np.zeros((16, 16, 3))
        with pytest.raises(ValueError):
            sample_batch("random", img, 257, np.random.default_rng(0))

    def test_colors_copied_from_image(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, size=(20, 24, 3))
        batch = sample_batch("random", img, 50, np.random.default_rng(1))
        for (u, v), c in zip(batch.pixels, batch.colors):
            assert np.array_equal(c, img[v, u])

    def test_constant_image_region_falls_back_to_random(self):
        img = np.full((16, 16, 3), 0.25)
        a = sample_batch("interest_region", img, 64, np.random.default_rng(7))
        b = sample_batch("random", img, 64, np.random.default_rng(7))
        assert np.array_equal(a.pixels, b.pixels)

    def test_interest_region_concentrates_near_edges(self):
        img = square_image(100, 30, 70)
        batch = sample_batch("interest_region", img, 256, np.random.default_rng(5), dilation_iters=3)
        near = 0
        for u, v in batch.pixels:
            d_edge = min(abs(u - 30), abs(u - 69), abs(v - 30), abs(v - 69))
            inside_band = (22 <= u <= 77) and (22 <= v <= 77)
            if inside_band and d_edge <= 8:
                near += 1
        assert near / len(batch) >= 0.9

    def test_interest_point_shortfall_filled_randomly(self):
        img = square_image(32, 10, 22)
        n_points = len(detect_interest_points(img))
        assert n_points < 300
        batch = sample_batch("interest_point", img, 300, np.random.default_rng(2))
        assert len(batch) == 300

    def test_seeded_determinism(self):
        img = square_image()
        a = sample_batch("interest_region", img, 128, np.random.default_rng(42))
        b = sample_batch("interest_region", img, 128, np.random.default_rng(42))
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.colors, b.colors)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError):
            sample_batch("fancy", square_image(), 10, np.random.default_rng(0))


class TestSaturation:
    def test_mask_saturates_and_matches_random(self):
        from scipy.stats import chisquare

        img = square_image(16, 4, 12)
        points = detect_interest_points(img)
        iters = int(np.ceil(16 / 4))
        mask = dilate_mask(points_mask((16, 16), points), iters)
        assert np.all(mask)

        sampler = BatchSampler(img, "interest_region", dilation_iters=iters)
        rng = np.random.default_rng(12345)
        counts = np.zeros(256)
        for _ in range(10_000):
            batch = sampler.sample(1, rng)
            u, v = batch.pixels[0]
            counts[v * 16 + u] += 1
        _, p = chisquare(counts)
        assert p > 0.01

    def test_default_iters(self):
        assert default_dilation_iters(512) == 3
        assert default_dilation_iters(2048) == 5
