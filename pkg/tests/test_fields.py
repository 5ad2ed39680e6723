import numpy as np
import pytest

from nerfpose.fields import (
    AnalyticField,
    Box,
    MLPField,
    Sphere,
    positional_encoding,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def red_sphere(radius=0.5, width=0.1, density=20.0):
    return AnalyticField(
        [Sphere(center=np.zeros(3), radius=radius, width=width, density=density,
                albedo=np.array([1.0, 0.0, 0.0]))]
    )


class TestPositionalEncoding:
    def test_zero_input(self):
        assert np.allclose(positional_encoding(np.array([0.0]), 2), [0, 1, 0, 1])

    def test_half(self):
        assert np.allclose(positional_encoding(np.array([0.5]), 1), [1.0, 0.0], atol=1e-15)

    def test_component_major_ordering(self):
        got = positional_encoding(np.array([0.25, -0.25]), 1)
        r = np.sqrt(2) / 2
        assert np.allclose(got, [r, r, -r, r])

    def test_zero_freqs_empty(self):
        assert positional_encoding(np.array([1.0, 2.0]), 0).shape == (0,)

    def test_batched_shape(self):
        out = positional_encoding(np.zeros((5, 3)), 4)
        assert out.shape == (5, 24)

    def test_negative_freqs_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(np.zeros(3), -1)


class TestAnalyticField:
    def test_sphere_center_is_peak(self):
        f = red_sphere()
        sigma, color = f.query(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert sigma == pytest.approx(20.0)
        assert np.allclose(color, [1.0, 0.0, 0.0], atol=1e-8)

    def test_far_outside_decays(self):
        f = red_sphere()
        sigma, _ = f.query(np.array([5.0, 5.0, 5.0]), np.array([0.0, 0.0, 1.0]))
        assert sigma < 1e-6

    def test_non_unit_direction_rejected(self):
        f = red_sphere()
        with pytest.raises(ValueError):
            f.query(np.zeros(3), np.array([0.0, 0.0, 2.0]))

    def test_shell_gradient_is_radial(self):
        f = red_sphere()
        x = unit([1.0, 2.0, -0.5]) * 0.5  # on the surface, mid-shell
        _, _, dsdx, _, _ = f.query_with_grads(x, np.array([0.0, 0.0, 1.0]))
        cosang = np.dot(unit(dsdx), unit(-x))
        assert cosang == pytest.approx(1.0, abs=1e-9)

    def test_empty_scene_is_vacuum(self):
        f = AnalyticField([])
        sigma, color = f.query(np.zeros((4, 3)), np.tile([0.0, 0.0, 1.0], (4, 1)))
        assert np.all(sigma == 0.0)
        assert np.all(color == 0.0)

    def test_query_and_grads_agree_on_outputs(self):
        f = two_blob_scene()
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.6, 0.6, size=(50, 3))
        d = rng.normal(size=(50, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        s1, c1 = f.query(x, d)
        s2, c2, *_ = f.query_with_grads(x, d)
        assert np.array_equal(s1, s2)
        assert np.array_equal(c1, c2)


def two_blob_scene():
    return AnalyticField(
        [
            Sphere(center=np.array([0.2, 0.0, 0.0]), radius=0.25, width=0.08,
                   density=14.0, albedo=np.array([0.9, 0.2, 0.1]), view_tint=0.2),
            Box(center=np.array([-0.2, 0.1, -0.05]), half_extents=np.array([0.15, 0.2, 0.12]),
                width=0.08, density=10.0, albedo=np.array([0.1, 0.7, 0.3])),
        ]
    )


def fd_jacobians(field, x, d, eps=2e-5):
    """Central-difference input Jacobians of query.

    The step balances truncation against roundoff for float64 fields with
    encoding frequencies up to ~100: truncation ~eps^2 f''' stays below the
    1e-5 absolute tolerance floor, roundoff ~1e-16/eps stays far below it.
    """
    dsdx = np.zeros(3)
    dcdx = np.zeros((3, 3))
    dcdd = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        sp, cp = field.query(x + e, d)
        sm, cm = field.query(x - e, d)
        dsdx[k] = (sp - sm) / (2 * eps)
        dcdx[:, k] = (cp - cm) / (2 * eps)
        sp, cp = field.query(x, d + e)
        sm, cm = field.query(x, d - e)
        dcdd[:, k] = (cp - cm) / (2 * eps)
    return dsdx, dcdx, dcdd


def assert_close_grad(analytic, numeric, rel=1e-3, floor=1e-5):
    denom = np.maximum(np.abs(numeric), floor / rel)
    assert np.all(np.abs(analytic - numeric) <= rel * denom), (
        f"analytic {analytic} vs numeric {numeric}"
    )


class TestAnalyticGradients:
    def test_against_finite_differences(self):
        f = two_blob_scene()
        rng = np.random.default_rng(42)
        centers = np.array([[0.2, 0.0, 0.0], [-0.2, 0.1, -0.05]])
        checked = 0
        for trial in range(200):
            if checked >= 25:
                break
            x = centers[trial % 2] + rng.uniform(-0.35, 0.35, size=3)
            d = unit(rng.normal(size=3))
            sigma, _, dsdx, dcdx, dcdd = f.query_with_grads(x, d)
            if sigma < 1e-3:
                continue  # color quotient is ill-conditioned in vacuum
            n_dsdx, n_dcdx, n_dcdd = fd_jacobians(f, x, d)
            assert_close_grad(dsdx, n_dsdx)
            assert_close_grad(dcdx, n_dcdx, rel=2e-3)
            assert_close_grad(dcdd, n_dcdd)
            checked += 1
        assert checked >= 20

    def test_constant_density_region_has_zero_gradient(self):
        f = red_sphere()
        _, _, dsdx, _, _ = f.query_with_grads(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(dsdx, 0.0)


class TestMLPField:
    def make(self, dtype=np.float64, seed=1):
        return MLPField.create(np.random.default_rng(seed), dtype=dtype)

    def test_deterministic(self):
        f = self.make()
        x = np.array([0.1, -0.2, 0.3])
        d = unit([0.5, 0.5, -0.7])
        s1, c1 = f.query(x, d)
        s2, c2 = f.query(x, d)
        assert s1 == s2
        assert np.array_equal(c1, c2)

    def test_output_ranges(self):
        f = self.make()
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=(200, 3))
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        sigma, color = f.query(x, d)
        assert np.all(sigma >= 0.0)
        assert np.all((color >= 0.0) & (color <= 1.0))

    def test_density_ignores_direction(self):
        f = self.make()
        x = np.array([[0.1, 0.2, 0.3]])
        s1, _ = f.query(x, np.array([[0.0, 0.0, 1.0]]))
        s2, _ = f.query(x, np.array([[1.0, 0.0, 0.0]]))
        assert s1[0] == s2[0]

    def test_input_jacobians_match_finite_differences(self):
        f = self.make(dtype=np.float64)
        rng = np.random.default_rng(7)
        for _ in range(25):
            x = rng.uniform(-0.8, 0.8, size=3)
            d = unit(rng.normal(size=3))
            _, _, dsdx, dcdx, dcdd = f.query_with_grads(x, d)
            n_dsdx, n_dcdx, n_dcdd = fd_jacobians(f, x, d)
            assert_close_grad(dsdx, n_dsdx)
            assert_close_grad(dcdx, n_dcdx)
            assert_close_grad(dcdd, n_dcdd)

    def test_query_and_grads_agree_on_outputs(self):
        f = self.make()
        rng = np.random.default_rng(9)
        x = rng.uniform(-1, 1, size=(20, 3))
        d = rng.normal(size=(20, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        s1, c1 = f.query(x, d)
        s2, c2, *_ = f.query_with_grads(x, d)
        assert np.array_equal(s1, s2)
        assert np.array_equal(c1, c2)

    def test_param_gradients_match_finite_differences(self):
        f = self.make(dtype=np.float64, seed=3)
        rng = np.random.default_rng(11)
        x = rng.uniform(-0.5, 0.5, size=(4, 3))
        d = rng.normal(size=(4, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        up_s = rng.normal(size=4)
        up_c = rng.normal(size=(4, 3))

        def objective():
            sigma, color = f.query(x, d)
            return float(np.sum(up_s * sigma) + np.sum(up_c * color))

        _, _, cache = f.forward_cached(x, d)
        grads = f.vjp_params(cache, up_s, up_c)
        eps = 1e-6
        for name in grads:
            w = f.params[name]["w"]
            idx = tuple(rng.integers(0, s) for s in w.shape)
            orig = w[idx]
            w[idx] = orig + eps
            plus = objective()
            w[idx] = orig - eps
            minus = objective()
            w[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            assert grads[name]["w"][idx] == pytest.approx(numeric, rel=1e-3, abs=1e-8)

    def test_save_load_round_trip(self, tmp_path):
        f = self.make(dtype=np.float32, seed=13)
        path = tmp_path / "field.nrf"
        f.save(path)
        g = MLPField.load(path)
        assert g.n_freqs_pos == f.n_freqs_pos
        assert g.n_freqs_dir == f.n_freqs_dir
        for (k1, a), (k2, b) in zip(f.param_items(), g.param_items()):
            assert k1 == k2
            assert np.array_equal(a, b)
        x = np.array([[0.1, 0.2, -0.3]])
        d = np.array([[0.0, 0.0, 1.0]])
        s1, c1 = f.query(x, d)
        s2, c2 = g.query(x, d)
        assert np.array_equal(s1, s2)
        assert np.array_equal(c1, c2)

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.nrf"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ValueError):
            MLPField.load(path)
