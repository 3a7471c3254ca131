"""Rigid-pose and pinhole-camera math shared by every pipeline stage.

Conventions: x_cam = R @ x_world + t, camera looks along +z, image x right,
y down. The camera center in world coordinates is C = -R.T @ t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-9
MIN_DEPTH = 1e-9


class GeometryError(ValueError):
    pass


def _as_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
        raise GeometryError("rotation is not orthonormal within 1e-9")
    if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
        raise GeometryError("rotation determinant is not +1 within 1e-9")
    return R


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform (R rotation, t translation in meters)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _as_rotation(self.R))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "t", t)
        self.R.setflags(write=False)
        self.t.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, C = -R.T @ t."""
        return -self.R.T @ self.t

    def compose(self, inner: "Pose") -> "Pose":
        """Transform applying `inner` first, then this pose."""
        return Pose(self.R @ inner.R, self.R @ inner.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into camera coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera with zero distortion; focal length and principal point in pixels."""

    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise GeometryError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics after resizing the image by `factor`."""
        return Intrinsics(
            f=self.f * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class PoseError:
    positional: float  # meters, distance between camera centers
    angular: float  # degrees, relative rotation angle

    def __post_init__(self):
        if self.positional < 0 or not (0 <= self.angular <= 180.0 + 1e-9):
            raise GeometryError("pose error out of range")


def project(X, pose: Pose, K: Intrinsics):
    """Project a world 3-point to pixel coordinates.

    Returns the (2,) pixel array, or None when the point is at or behind
    the camera plane (z <= 1e-9).
    """
    xc = pose.R @ np.asarray(X, dtype=np.float64) + pose.t
    if xc[2] <= MIN_DEPTH:
        return None
    return np.array([K.f * xc[0] / xc[2] + K.cx, K.f * xc[1] / xc[2] + K.cy])


def project_points(X: np.ndarray, pose: Pose, K: Intrinsics):
    """Vectorized projection of (n, 3) world points.

    Returns (pixels (n, 2), valid (n,)) where invalid rows are behind the
    camera; their pixel values are unspecified.
    """
    xc = pose.transform(X)
    z = xc[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    pix = np.empty((xc.shape[0], 2))
    pix[:, 0] = K.f * xc[:, 0] / zs + K.cx
    pix[:, 1] = K.f * xc[:, 1] / zs + K.cy
    return pix, valid


def backproject(p, depth: float, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Back-project a pixel at a given camera-frame z-depth to a world 3-point."""
    if not depth > 0:
        raise GeometryError("depth must be positive")
    p = np.asarray(p, dtype=np.float64)
    xc = np.array([(p[0] - K.cx) * depth / K.f, (p[1] - K.cy) * depth / K.f, depth])
    return pose.R.T @ (xc - pose.t)


def backproject_points(pix: np.ndarray, depth: np.ndarray, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Vectorized back-projection of (n, 2) pixels with (n,) z-depths."""
    pix = np.asarray(pix, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise GeometryError("depths must be positive")
    xc = np.empty((pix.shape[0], 3))
    xc[:, 0] = (pix[:, 0] - K.cx) * depth / K.f
    xc[:, 1] = (pix[:, 1] - K.cy) * depth / K.f
    xc[:, 2] = depth
    return (xc - pose.t) @ pose.R


def pose_error(est: Pose, gt: Pose) -> PoseError:
    """Positional (m) and angular (deg) difference between two poses."""
    positional = float(np.linalg.norm(est.center - gt.center))
    cos_angle = (np.trace(est.R @ gt.R.T) - 1.0) / 2.0
    angular = math.degrees(math.acos(min(1.0, max(-1.0, cos_angle))))
    return PoseError(positional=positional, angular=angular)


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues: rotation matrix for axis-angle vector w (radians)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    Wx = skew(w)
    if theta < 1e-12:
        # second-order expansion keeps derivatives smooth near zero
        return np.eye(3) + Wx + 0.5 * (Wx @ Wx)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * Wx
        + ((1.0 - math.cos(theta)) / theta**2) * (Wx @ Wx)
    )


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues; returns the axis-angle vector with angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    if theta < 1e-12:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if abs(math.pi - theta) < 1e-6:
        # near 180 degrees the off-diagonal formula degenerates; use R + I
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        k = int(np.argmax(axis))
        axis = M[:, k] / max(axis[k], 1e-12)
        axis /= np.linalg.norm(axis)
        return axis * theta
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * (theta / (2.0 * math.sin(theta)))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD; fixes accumulated drift."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    R0 = U @ Vt
    if np.linalg.det(R0) < 0:
        U[:, -1] = -U[:, -1]
        R0 = U @ Vt
    return R0


def format_pose_line(pose: Pose) -> str:
    """12 whitespace-separated decimals: R row-major, then t."""
    vals = np.concatenate([pose.R.reshape(-1), pose.t])
    return " ".join(repr(float(v)) for v in vals)


def parse_pose_line(line: str) -> Pose:
    parts = line.split()
    if len(parts) != 12:
        raise GeometryError(f"pose line needs 12 numbers, got {len(parts)}")
    vals = np.array([float(p) for p in parts])
    return Pose(vals[:9].reshape(3, 3), vals[9:])


def pose_from_numbers(vals) -> Pose:
    vals = np.asarray(vals, dtype=np.float64).reshape(-1)
    if vals.size != 12:
        raise GeometryError(f"pose needs 12 numbers, got {vals.size}")
    return Pose(vals[:9].reshape(3, 3), vals[9:])


def pose_to_numbers(pose: Pose) -> list:
    return [float(v) for v in np.concatenate([pose.R.reshape(-1), pose.t])]
