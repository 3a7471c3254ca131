"""Indoor visual localization engine.

Estimates the 6DoF pose of an RGB query against a database of
pose-registered RGBD images in three progressively stricter stages:
global-descriptor retrieval, dense coarse-to-fine matching with
P3P-LO-RANSAC pose estimation, and pose verification by view synthesis.
"""

from .geometry import Intrinsics, Pose, PoseError, pose_error, project, backproject

__all__ = [
    "Intrinsics",
    "Pose",
    "PoseError",
    "pose_error",
    "project",
    "backproject",
]

__version__ = "0.1.0"
