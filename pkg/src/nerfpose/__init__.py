"""Mesh-free 6-DoF pose estimation by inverting a differentiable radiance field."""

__version__ = "0.1.0"

from .se3 import Pose, exp_se3, log_se3, pose_errors, perturb_pose  # noqa: F401
