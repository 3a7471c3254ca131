"""Poses, pinhole projection, and pose-error metrics.

Walks through the core conventions: x_cam = R @ x_world + t, camera
looking along +z, camera center C = -R.T @ t.
"""

import numpy as np

from denseloc.geometry import (
    Intrinsics,
    Pose,
    backproject,
    pose_error,
    project,
    rotation_from_axis_angle,
)

K = Intrinsics(f=500.0, cx=320.0, cy=240.0, width=640, height=480)
print("intrinsics:", K)

# A camera 2 m back from the origin, looking straight at it.
cam = Pose(np.eye(3), np.array([0.0, 0.0, 2.0]))
print("camera center:", cam.center)

X = np.array([0.3, -0.2, 1.0])
pix = project(X, cam, K)
print(f"world point {X} -> pixel {np.round(pix, 2)}")

# Back-projection inverts projection given the camera-frame depth.
depth = (cam.R @ X + cam.t)[2]
X_back = backproject(pix, depth, cam, K)
print("roundtrip error:", np.linalg.norm(X_back - X))

# Points behind the camera are flagged, not projected.
behind = project(np.array([0.0, 0.0, -5.0]), cam, K)
print("behind-camera projection:", behind)

# Pose errors: positional in meters between centers, angular in degrees.
wobble = rotation_from_axis_angle(np.radians([0.0, 5.0, 0.0]))
estimate = Pose(wobble @ cam.R, wobble @ cam.t + np.array([0.03, 0.0, 0.04]))
err = pose_error(estimate, cam)
print(f"pose error: {err.positional:.3f} m, {err.angular:.2f} deg")
