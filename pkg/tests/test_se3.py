import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfpose import se3
from nerfpose.se3 import (
    Pose,
    RotationBranchError,
    exp_se3,
    log_se3,
    perturb_pose,
    pose_errors,
    se3_left_jacobian,
)


def twist_matrix(xi):
    """Independent 4x4 twist builder (kept separate from the library's)."""
    wx, wy, wz, vx, vy, vz = xi
    return np.array(
        [
            [0.0, -wz, wy, vx],
            [wz, 0.0, -wx, vy],
            [-wy, wx, 0.0, vz],
            [0.0, 0.0, 0.0, 0.0],
        ]
    )


def series_exp(xi, terms=12):
    """Truncated power series of the 4x4 twist matrix, with scaling and
    squaring so the truncation stays below 1e-12 at any input magnitude."""
    a = twist_matrix(xi)
    scale = max(0, int(np.ceil(np.log2(max(np.max(np.abs(a)), 1e-30) / 0.25))))
    a = a / (2.0**scale)
    acc = np.eye(4)
    term = np.eye(4)
    for k in range(1, terms):
        term = term @ a / k
        acc = acc + term
    for _ in range(scale):
        acc = acc @ acc
    return acc


def random_coords(rng, max_angle=np.pi - 0.01, trans_scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    v = rng.normal(scale=trans_scale, size=3)
    return np.concatenate([axis * angle, v])


class TestExp:
    def test_zero_gives_identity(self):
        p = exp_se3(np.zeros(6))
        assert np.allclose(p.matrix(), np.eye(4), atol=1e-12)

    def test_quarter_turn_about_z(self):
        p = exp_se3([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0])
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(p.rotation, expected, atol=1e-12)
        assert np.allclose(p.translation, 0.0, atol=1e-12)

    def test_pure_translation(self):
        p = exp_se3([0.0, 0.0, 0.0, 0.3, 0.0, 0.0])
        assert np.allclose(p.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(p.translation, [0.3, 0.0, 0.0], atol=1e-12)

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            xi = random_coords(rng)
            assert np.allclose(exp_se3(xi).matrix(), series_exp(xi), atol=1e-9)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            exp_se3([np.nan, 0, 0, 0, 0, 0])
        with pytest.raises(ValueError):
            exp_se3([0, 0, np.inf, 0, 0, 0])

    def test_rotation_orthonormal_up_to_theta_10(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            xi = np.concatenate([axis * rng.uniform(0, 10.0), rng.normal(size=3)])
            r = exp_se3(xi).rotation
            assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
            assert abs(np.linalg.det(r) - 1.0) < 1e-9


class TestLog:
    def test_identity(self):
        assert np.allclose(log_se3(Pose.identity()), np.zeros(6), atol=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            xi = random_coords(rng, max_angle=3.0)
            assert np.max(np.abs(log_se3(exp_se3(xi)) - xi)) < 1e-8

    def test_exp_of_log_recovers_pose(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            t = exp_se3(random_coords(rng))
            u = exp_se3(log_se3(t))
            assert np.max(np.abs(u.matrix() - t.matrix())) < 1e-8

    def test_near_pi_against_nonlinear_solve(self):
        from scipy.optimize import least_squares

        angle = np.pi - 1e-3
        pose = exp_se3([0.0, 0.0, angle, 0.0, 0.0, 0.0])
        got = log_se3(pose)
        assert np.allclose(got, [0.0, 0.0, angle, 0.0, 0.0, 0.0], atol=1e-8)

        # Independent route: solve series_exp(xi) = T for xi.
        target = pose.matrix()
        sol = least_squares(
            lambda xi: (series_exp(xi, terms=20) - target).ravel(),
            x0=np.array([0.0, 0.0, angle - 0.05, 0.01, 0.0, 0.0]),
            xtol=1e-15,
            ftol=1e-15,
        )
        assert np.allclose(got, sol.x, atol=1e-6)

    def test_rejects_angle_at_pi(self):
        pose = Pose(np.diag([1.0, -1.0, -1.0]), np.zeros(3))
        with pytest.raises(RotationBranchError):
            log_se3(pose)


class TestPoseErrors:
    def test_same_pose(self):
        rng = np.random.default_rng(5)
        t = exp_se3(random_coords(rng))
        assert pose_errors(t, t) == (0.0, 0.0)

    def test_quarter_turn(self):
        b = exp_se3([np.pi / 2, 0.0, 0.0, 0.0, 0.0, 0.0])
        rot, trans = pose_errors(Pose.identity(), b)
        assert abs(rot - 90.0) < 1e-9
        assert trans == 0.0

    def test_translation_345(self):
        b = Pose(np.eye(3), np.array([0.03, 0.04, 0.0]))
        rot, trans = pose_errors(Pose.identity(), b)
        assert rot == 0.0
        assert abs(trans - 0.05) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            a = exp_se3(random_coords(rng))
            b = exp_se3(random_coords(rng))
            ra, ta = pose_errors(a, b)
            rb, tb = pose_errors(b, a)
            assert ra == rb
            assert abs(ta - tb) < 1e-12


class TestPerturb:
    def test_zero_limits_identity(self):
        rng = np.random.default_rng(0)
        base = exp_se3(random_coords(rng))
        out = perturb_pose(base, 0.0, 0.0, np.random.default_rng(1))
        assert np.allclose(out.matrix(), base.matrix(), atol=1e-15)

    def test_limits_respected(self):
        rng = np.random.default_rng(23)
        base = exp_se3(random_coords(rng))
        for seed in range(50):
            out = perturb_pose(base, 40.0, 0.2, np.random.default_rng(seed))
            rot, _ = pose_errors(base, out)
            assert rot <= 40.0 + 1e-9
            assert np.max(np.abs(out.translation - base.translation)) <= 0.2

    def test_seeded_determinism(self):
        base = Pose.identity()
        a = perturb_pose(base, 30.0, 0.1, np.random.default_rng(99))
        b = perturb_pose(base, 30.0, 0.1, np.random.default_rng(99))
        assert np.array_equal(a.matrix(), b.matrix())

    def test_negative_limit_rejected(self):
        with pytest.raises(ValueError):
            perturb_pose(Pose.identity(), -1.0, 0.0, np.random.default_rng(0))


coords_strategy = st.lists(
    st.floats(min_value=-1.5, max_value=1.5, allow_nan=False), min_size=6, max_size=6
)


@given(coords_strategy)
@settings(max_examples=100, deadline=None)
def test_round_trip_property(xi):
    xi = np.asarray(xi)
    if np.linalg.norm(xi[:3]) >= np.pi - 0.01:
        return
    assert np.max(np.abs(log_se3(exp_se3(xi)) - xi)) < 1e-8


@given(coords_strategy)
@settings(max_examples=100, deadline=None)
def test_group_closure_property(xi):
    xi = np.asarray(xi)
    m = exp_se3(xi).compose(exp_se3(-xi)).matrix()
    assert np.max(np.abs(m - np.eye(4))) < 1e-8


class TestLeftJacobian:
    def series_jacobian(self, xi, terms=40):
        """Independent oracle: J = sum_k ad^k / (k+1)!."""
        phi, rho = xi[:3], xi[3:]
        ad = np.zeros((6, 6))
        ad[:3, :3] = se3.skew(phi)
        ad[3:, 3:] = se3.skew(phi)
        ad[3:, :3] = se3.skew(rho)
        acc = np.eye(6)
        term = np.eye(6)
        for k in range(1, terms):
            term = term @ ad / (k + 1)
            acc = acc + term
        return acc

    def test_matches_series(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            xi = random_coords(rng, max_angle=3.0)
            assert np.allclose(se3_left_jacobian(xi), self.series_jacobian(xi), atol=1e-10)

    def test_small_angle_branch_matches_series(self):
        rng = np.random.default_rng(37)
        for scale in [1e-10, 1e-6, 1e-4, 5e-4, 2e-3]:
            xi = rng.normal(size=6)
            xi[:3] *= scale / np.linalg.norm(xi[:3])
            assert np.allclose(se3_left_jacobian(xi), self.series_jacobian(xi), atol=1e-10)

    def test_against_finite_differences_of_exp(self):
        # exp(xi + eps e_k) ~= exp(J eps e_k) exp(xi): recover columns of J
        # by central differences in the left-trivialized tangent.
        rng = np.random.default_rng(41)
        eps = 1e-6
        for _ in range(20):
            xi = random_coords(rng, max_angle=2.5)
            j = se3_left_jacobian(xi)
            base_inv = exp_se3(xi).inverse()
            for k in range(6):
                dp = np.zeros(6)
                dp[k] = eps
                col_plus = log_se3(exp_se3(xi + dp).compose(base_inv))
                col_minus = log_se3(exp_se3(xi - dp).compose(base_inv))
                col = (col_plus - col_minus) / (2 * eps)
                assert np.allclose(col, j[:, k], atol=1e-6)


class TestPoseHelpers:
    def test_matrix_round_trip(self):
        rng = np.random.default_rng(43)
        t = exp_se3(random_coords(rng))
        assert np.allclose(Pose.from_matrix(t.matrix()).matrix(), t.matrix())

    def test_validate_rejects_bad_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.001, np.zeros(3)).validate()

    def test_apply_points(self):
        p = exp_se3([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0])
        pts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert np.allclose(p.apply(pts), [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]], atol=1e-12)
