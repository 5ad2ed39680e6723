"""Rigid-body transforms on SE(3) in exponential (screw) coordinates.

A pose is a camera-to-world transform (R, t): a point p in camera
coordinates maps to R @ p + t in world coordinates.

Exponential coordinates are 6-vectors [w*theta | v*theta] with the
rotation part first, in radians.  For theta > 0 the screw axis is
(w, v) with ||w|| = 1 and theta = ||w*theta||; theta = 0 is the
pure-translation convention where the 6-vector is (0, v*theta).

The exponential map is

    exp([S] theta) = [ exp([w] theta)  K(S, theta) ]
                     [ 0              1            ]

with exp([w] theta) the Rodrigues rotation and

    K(S, theta) = (I theta + (1 - cos theta) [w]
                   + (theta - sin theta) [w]^2) v,

which equals the SO(3) left Jacobian of w*theta applied to v*theta.
Pose increments compose by left multiplication, exp(xi) @ T0, so a
rotation increment pivots about the world (model) origin rather than
the camera center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed-form coefficients lose precision
# to cancellation; switch to their Taylor expansions.
_SMALL_ANGLE = 1e-6

# Rotations closer than this to pi are rejected by the log map.
_PI_BRANCH = 1e-6


class RotationBranchError(ValueError):
    """Log map requested for a rotation too close to pi (ambiguous axis)."""


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 skew-symmetric matrix [v] with [v] @ u = v x u."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: 3x3 rotation plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        """Row-major homogeneous 4x4 matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other) @ p = self @ (other @ p)."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ValueError unless the rotation block is special orthogonal."""
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose has wrong shapes")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("pose has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of a rotation vector w = axis * angle."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    a = np.sin(theta) / theta
    # 1 - cos(theta) written as 2 sin^2(theta/2): no cancellation.
    half = 0.5 * theta
    b = 2.0 * np.sin(half) ** 2 / (theta * theta)
    return np.eye(3) + a * k + b * k2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of r; raises RotationBranchError near angle pi."""
    r = np.asarray(r, dtype=float)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if np.pi - theta < _PI_BRANCH:
        raise RotationBranchError(
            f"rotation angle {theta:.9f} is within {_PI_BRANCH} of pi; "
            "the principal branch is ambiguous"
        )
    axis_raw = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * axis_raw
    return (theta / (2.0 * np.sin(theta))) * axis_raw


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """Left Jacobian J of SO(3): translation block of exp is J(w*theta) @ v*theta."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    t2 = theta * theta
    a = 2.0 * np.sin(0.5 * theta) ** 2 / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * k2


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    """Closed-form inverse of the SO(3) left Jacobian."""
    w = np.asarray(w, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    k = skew(w)
    k2 = k @ k
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        c = 1.0 / 12.0 + t2 / 720.0
    else:
        # Half-angle cotangent form stays stable as theta -> 0.
        half = 0.5 * theta
        c = (1.0 - half / np.tan(half)) / t2
    return np.eye(3) - 0.5 * k + c * k2


def exp_se3(coords: np.ndarray) -> Pose:
    """Exponential map from a 6-vector [w*theta | v*theta] to a Pose."""
    xi = np.asarray(coords, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("exponential coordinates must be finite")
    w, v = xi[:3], xi[3:]
    return Pose(so3_exp(w), so3_left_jacobian(w) @ v)


def log_se3(pose: Pose) -> np.ndarray:
    """Inverse of exp_se3 on the principal branch (rotation angle < pi)."""
    w = so3_log(pose.rotation)
    v = so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, v])


def hat(coords: np.ndarray) -> np.ndarray:
    """4x4 twist matrix of a 6-vector [w*theta | v*theta]."""
    xi = np.asarray(coords, dtype=float).reshape(6)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[:3])
    m[:3, 3] = xi[3:]
    return m


def se3_left_jacobian(coords: np.ndarray) -> np.ndarray:
    """6x6 left Jacobian of the SE(3) exponential at coords.

    Satisfies exp(xi + d) ~= exp(J @ d) @ exp(xi) to first order in d,
    so dL/dxi = J.T @ g where g is the gradient with respect to a
    left-multiplied increment.  Block layout for the [w*theta | v*theta]
    ordering is [[J_so3, 0], [Q, J_so3]] with Q the standard coupling
    block (Barfoot-style closed form).
    """
    xi = np.asarray(coords, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    p = skew(phi)
    r = skew(rho)
    p2 = p @ p
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    if theta < 1e-3:
        # Taylor coefficients with O(theta^4) truncation error.
        t2 = theta * theta
        a2 = 1.0 / 6.0 - t2 / 120.0
        a3 = 1.0 / 24.0 - t2 / 720.0
        a4 = 1.0 / 120.0 - t2 / 2520.0
    else:
        t2 = theta * theta
        t3 = t2 * theta
        a2 = (theta - np.sin(theta)) / t3
        a3 = (t2 + 2.0 * np.cos(theta) - 2.0) / (2.0 * t2 * t2)
        a4 = (2.0 * theta - 3.0 * np.sin(theta) + theta * np.cos(theta)) / (2.0 * t2 * t3)
    q = (
        0.5 * r
        + a2 * (pr + rp + prp)
        + a3 * (p2 @ r + r @ p2 - 3.0 * prp)
        + a4 * (prp @ p + p @ prp)
    )
    j_so3 = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = j_so3
    out[3:, 3:] = j_so3
    out[3:, :3] = q
    return out


def pose_errors(a: Pose, b: Pose) -> tuple[float, float]:
    """Rotation error in degrees and translation error in scene units.

    Rotation error is the geodesic angle between the two rotations;
    translation error is the Euclidean distance between camera centers.
    Symmetric in its arguments.
    """
    # trace(Ra.T @ Rb) as an elementwise sum; exactly symmetric in a, b.
    cos_arg = np.clip((np.sum(a.rotation * b.rotation) - 1.0) / 2.0, -1.0, 1.0)
    rot_deg = float(np.degrees(np.arccos(cos_arg)))
    trans = float(np.linalg.norm(a.translation - b.translation))
    return rot_deg, trans


def perturb_pose(
    pose: Pose,
    rot_limit_deg: float,
    trans_limit: float,
    rng: np.random.Generator,
) -> Pose:
    """Randomly perturb a pose within the given limits.

    Rotates the orientation about a uniformly random unit axis by an
    angle drawn from Uniform[-rot_limit_deg, rot_limit_deg], then offsets
    each translation component by Uniform[-trans_limit, trans_limit].
    """
    if rot_limit_deg < 0 or trans_limit < 0:
        raise ValueError("perturbation limits must be nonnegative")
    axis = rng.normal(size=3)
    n = np.linalg.norm(axis)
    while n < 1e-12:
        axis = rng.normal(size=3)
        n = np.linalg.norm(axis)
    axis = axis / n
    angle = np.radians(rng.uniform(-rot_limit_deg, rot_limit_deg))
    offset = rng.uniform(-trans_limit, trans_limit, size=3)
    return Pose(so3_exp(axis * angle) @ pose.rotation, pose.translation + offset)
