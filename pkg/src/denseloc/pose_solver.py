"""Absolute camera pose from 2D-3D correspondences.

The minimal perspective-three-point solver reduces to a Grunert-style
quartic in the ratio of camera-to-point distances; candidate roots are
polished by Newton iteration and converted to poses by absolute
orientation. A LO-RANSAC loop with nonlinear refinement on inlier sets
provides the robust estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Intrinsics,
    Pose,
    orthonormalize,
    rotation_from_axis_angle,
    skew,
)


class PoseSolverError(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence2D3D:
    """Query pixel paired with the world point behind the matched database pixel."""

    pixel: tuple  # (x, y)
    point: np.ndarray  # (3,) world, meters

    def __post_init__(self):
        pt = np.asarray(self.point, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(pt)):
            raise PoseSolverError("world point must be finite")
        object.__setattr__(self, "point", pt)


@dataclass(frozen=True)
class PoseHypothesis:
    db_id: str
    pose: Pose
    inlier_indices: tuple
    inlier_count: int
    mean_reproj_error: float


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    diverged: bool
    initial_cost: float
    final_cost: float
    iterations: int


def _corr_arrays(corrs):
    pixels = np.array([c.pixel for c in corrs], dtype=np.float64)
    points = np.array([c.point for c in corrs], dtype=np.float64)
    return pixels, points


def reprojection_errors(pose: Pose, pixels: np.ndarray, points: np.ndarray,
                        K: Intrinsics) -> np.ndarray:
    """Per-correspondence pixel error; inf where the point falls behind the camera."""
    xc = pose.transform(points)
    z = xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    du = K.f * xc[:, 0] / zs + K.cx - pixels[:, 0]
    dv = K.f * xc[:, 1] / zs + K.cy - pixels[:, 1]
    err = np.hypot(du, dv)
    return np.where(ok, err, np.inf)


def _min_triangle_height(X: np.ndarray) -> float:
    e = np.array([
        np.linalg.norm(X[1] - X[2]),
        np.linalg.norm(X[0] - X[2]),
        np.linalg.norm(X[0] - X[1]),
    ])
    area2 = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    longest = e.max()
    return area2 / longest if longest > 0 else 0.0


def _absolute_orientation(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Proper rotation R, translation t with Y ~= R X + t (Kabsch)."""
    Xm = X.mean(axis=0)
    Ym = Y.mean(axis=0)
    H = (X - Xm).T @ (Y - Ym)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = Ym - R @ Xm
    return R, t


def solve_p3p(corrs, K: Intrinsics) -> list[Pose]:
    """All real solutions of the perspective-three-point problem.

    Rejects collinear world points (smallest triangle height <= 1e-9 m).
    Every returned pose reprojects the three points onto their pixels
    within 1e-6 px.
    """
    if len(corrs) != 3:
        raise PoseSolverError("P3P needs exactly three correspondences")
    pixels, X = _corr_arrays(corrs)
    if _min_triangle_height(X) <= 1e-9:
        raise PoseSolverError("world points are collinear")

    rays = np.column_stack([
        (pixels[:, 0] - K.cx) / K.f,
        (pixels[:, 1] - K.cy) / K.f,
        np.ones(3),
    ])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    a2 = float(np.sum((X[1] - X[2]) ** 2))
    b2 = float(np.sum((X[0] - X[2]) ** 2))
    c2 = float(np.sum((X[0] - X[1]) ** 2))
    p = 2.0 * float(rays[1] @ rays[2])  # opposite side a
    q = 2.0 * float(rays[0] @ rays[2])  # opposite side b
    r = 2.0 * float(rays[0] @ rays[1])  # opposite side c

    # s2 = u s1, s3 = v s1 turn the three law-of-cosines constraints into
    #   F1 = b2 (u^2 + v^2 - p u v) - a2 (1 + v^2 - q v) = 0
    #   F2 = b2 (1 + u^2 - r u)     - c2 (1 + v^2 - q v) = 0
    # eliminating u via u = N(v)/D(v) leaves a quartic in v.
    N = np.array([a2 - b2 - c2, -q * (a2 - c2), a2 + b2 - c2])
    D = np.array([-b2 * p, b2 * r])
    G = np.array([-c2, c2 * q, b2 - c2])
    poly = np.polyadd(
        np.polyadd(b2 * np.polymul(N, N), -b2 * r * np.polymul(N, D)),
        np.polymul(G, np.polymul(D, D)),
    )

    lead = np.max(np.abs(poly))
    if lead <= 0:
        return []
    poly = poly / lead
    nz = np.nonzero(np.abs(poly) > 1e-14)[0]
    if nz.size == 0:
        return []
    poly = poly[nz[0]:]
    if poly.size < 2:
        return []
    roots = np.roots(poly)

    poses = []
    for root in roots:
        # near-multiple roots may surface as a complex pair; polish the real
        # part and let the reprojection gate reject spurious candidates
        v = _polish_quartic_root(poly, float(root.real))
        if v <= 0:
            continue
        u = _u_from_v(v, a2, b2, c2, p, q, r)
        if u is None or u <= 0:
            continue
        u, v = _polish_uv(u, v, a2, b2, c2, p, q, r)
        if u <= 0 or v <= 0:
            continue
        s1_sq = 1.0 + v * v - q * v
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(b2) / math.sqrt(s1_sq)
        Y = np.array([s1 * rays[0], u * s1 * rays[1], v * s1 * rays[2]])
        R, t = _absolute_orientation(X, Y)
        try:
            pose = Pose(orthonormalize(R), t)
        except ValueError:
            continue
        pose = _polish_pose(pose, corrs, K)
        errs = reprojection_errors(pose, pixels, X, K)
        if np.all(np.isfinite(errs)) and errs.max() < 1e-6:
            if not any(_poses_close(pose, other) for other in poses):
                poses.append(pose)
    return poses


def _polish_pose(pose: Pose, corrs, K: Intrinsics, iters: int = 3) -> Pose:
    """Undamped Gauss-Newton steps on the minimal system; machine-precision poses."""
    for _ in range(iters):
        res, J = residuals_and_jacobian(pose, corrs, K)
        if not np.all(np.isfinite(res)):
            return pose
        try:
            step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        except np.linalg.LinAlgError:
            return pose
        candidate = _apply_step(pose, step)
        cand_res = _residuals(candidate, *_corr_arrays(corrs), K)
        if not np.all(np.isfinite(cand_res)) or \
                np.linalg.norm(cand_res) > np.linalg.norm(res):
            return pose
        pose = candidate
        if np.linalg.norm(step) < 1e-15:
            break
    return pose


def _polish_quartic_root(poly: np.ndarray, v: float, iters: int = 20) -> float:
    dpoly = np.polyder(poly)
    for _ in range(iters):
        f = float(np.polyval(poly, v))
        df = float(np.polyval(dpoly, v))
        if abs(df) < 1e-300:
            break
        step = f / df
        v -= step
        if abs(step) < 1e-15 * max(1.0, abs(v)):
            break
    return v


def _u_from_v(v, a2, b2, c2, p, q, r):
    num = (a2 - b2 - c2) * v * v - q * (a2 - c2) * v + (a2 + b2 - c2)
    den = b2 * (r - p * v)
    if abs(den) > 1e-10 * b2 * (1.0 + abs(v)):
        return num / den
    # denominator vanishes: fall back to the quadratic constraint F2 in u
    disc = b2 * b2 * r * r - 4.0 * b2 * (b2 - c2 - c2 * v * v + c2 * q * v)
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    candidates = [(b2 * r + sq) / (2 * b2), (b2 * r - sq) / (2 * b2)]
    best, best_res = None, math.inf
    for u in candidates:
        if u <= 0:
            continue
        res = abs(b2 * (u * u + v * v - p * u * v) - a2 * (1 + v * v - q * v))
        if res < best_res:
            best, best_res = u, res
    return best


def _polish_uv(u, v, a2, b2, c2, p, q, r, iters: int = 4):
    """Joint Newton on the two distance-ratio constraints."""
    for _ in range(iters):
        f1 = b2 * (u * u + v * v - p * u * v) - a2 * (1 + v * v - q * v)
        f2 = b2 * (1 + u * u - r * u) - c2 * (1 + v * v - q * v)
        j11 = b2 * (2 * u - p * v)
        j12 = b2 * (2 * v - p * u) - a2 * (2 * v - q)
        j21 = b2 * (2 * u - r)
        j22 = -c2 * (2 * v - q)
        det = j11 * j22 - j12 * j21
        if abs(det) < 1e-18:
            break
        du = (f1 * j22 - f2 * j12) / det
        dv = (j11 * f2 - j21 * f1) / det
        u -= du
        v -= dv
        if abs(du) + abs(dv) < 1e-16 * (1 + abs(u) + abs(v)):
            break
    return u, v


def _poses_close(a: Pose, b: Pose, tol_t: float = 1e-9, tol_r: float = 1e-7) -> bool:
    if np.linalg.norm(a.t - b.t) > tol_t:
        return False
    cosang = (np.trace(a.R @ b.R.T) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cosang))) < tol_r


# ---------------------------------------------------------------------------
# Nonlinear refinement
# ---------------------------------------------------------------------------

_BEHIND_RESIDUAL = 1.0e6  # px, stands in for points behind the camera


def _residuals(pose: Pose, pixels, points, K) -> np.ndarray:
    """Stacked (2n,) reprojection residuals; behind-camera points get a huge value."""
    xc = pose.transform(points)
    z = xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    ru = K.f * xc[:, 0] / zs + K.cx - pixels[:, 0]
    rv = K.f * xc[:, 1] / zs + K.cy - pixels[:, 1]
    res = np.column_stack([
        np.where(ok, ru, _BEHIND_RESIDUAL),
        np.where(ok, rv, _BEHIND_RESIDUAL),
    ])
    return res.reshape(-1)


def _residuals_jacobian_arrays(pose: Pose, pixels, points, K: Intrinsics):
    res = _residuals(pose, pixels, points, K)
    xc = pose.transform(points)
    z = xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    n = points.shape[0]
    inv_z = 1.0 / zs
    du_dx = np.zeros((n, 3))
    dv_dx = np.zeros((n, 3))
    du_dx[:, 0] = K.f * inv_z
    du_dx[:, 2] = -K.f * xc[:, 0] * inv_z**2
    dv_dx[:, 1] = K.f * inv_z
    dv_dx[:, 2] = -K.f * xc[:, 1] * inv_z**2
    # d(x_cam)/d(w) = -[x_cam]x, so row a maps to a @ (-[x]x) = x cross a
    J = np.zeros((2 * n, 6))
    J[0::2, 0:3] = np.cross(xc, du_dx)
    J[0::2, 3:6] = du_dx
    J[1::2, 0:3] = np.cross(xc, dv_dx)
    J[1::2, 3:6] = dv_dx
    bad = np.repeat(~ok, 2)
    J[bad] = 0.0
    return res, J


def residuals_and_jacobian(pose: Pose, corrs, K: Intrinsics):
    """Residual vector and its (2n, 6) Jacobian wrt a local pose update.

    The update convention is R <- exp([w]x) R, t <- exp([w]x) t + dt with
    parameters (w, dt) evaluated at zero; behind-camera points contribute a
    constant residual with zero Jacobian.
    """
    pixels, points = _corr_arrays(corrs)
    return _residuals_jacobian_arrays(pose, pixels, points, K)


def _huber_cost(res2n: np.ndarray, delta: float) -> float:
    e = np.hypot(res2n[0::2], res2n[1::2])
    small = e <= delta
    return float(np.sum(np.where(small, 0.5 * e**2, delta * (e - 0.5 * delta))))


def _huber_weights(res2n: np.ndarray, delta: float) -> np.ndarray:
    e = np.hypot(res2n[0::2], res2n[1::2])
    w = np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-12))
    return np.repeat(w, 2)


def _apply_step(pose: Pose, step: np.ndarray) -> Pose:
    Rw = rotation_from_axis_angle(step[:3])
    return Pose(orthonormalize(Rw @ pose.R), Rw @ pose.t + step[3:])


def refine_pose(pose: Pose, corrs, K: Intrinsics, huber_delta: float = 5.0,
                max_iter: int = 100, step_tol: float = 1e-10,
                cost_tol: float = 1e-12) -> RefineResult:
    """Damped Gauss-Newton over a 6-parameter local pose update.

    Minimizes the sum of Huber-robustified squared reprojection errors.
    Steps that fail to decrease the cost are rejected with increased
    damping, so the final cost never exceeds the initial one. Divergence
    (non-finite cost) returns the initial pose flagged.
    """
    if len(corrs) < 3:
        raise PoseSolverError("refinement needs at least 3 correspondences")
    pixels, points = _corr_arrays(corrs)
    if len(corrs) == 3 and _min_triangle_height(points[:3]) <= 1e-9:
        raise PoseSolverError("refinement points are collinear")
    return _refine_arrays(pose, pixels, points, K, huber_delta,
                          max_iter, step_tol, cost_tol)


def _refine_arrays(pose: Pose, pixels, points, K: Intrinsics,
                   huber_delta: float, max_iter: int = 100,
                   step_tol: float = 1e-10, cost_tol: float = 1e-12) -> RefineResult:
    current = pose
    res = _residuals(current, pixels, points, K)
    cost = _huber_cost(res, huber_delta)
    initial_cost = cost
    if not math.isfinite(cost):
        return RefineResult(pose, True, cost, cost, 0)

    lam = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        _, J = _residuals_jacobian_arrays(current, pixels, points, K)
        w = _huber_weights(res, huber_delta)
        Jw = J * w[:, None]
        H = Jw.T @ J
        g = Jw.T @ res
        accepted = False
        for _ in range(10):
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            candidate = _apply_step(current, step)
            cand_res = _residuals(candidate, pixels, points, K)
            cand_cost = _huber_cost(cand_res, huber_delta)
            if not math.isfinite(cand_cost):
                lam *= 10
                continue
            if cand_cost < cost:
                decrease = cost - cand_cost
                current, res, cost = candidate, cand_res, cand_cost
                lam = max(lam / 3, 1e-12)
                accepted = True
                if np.linalg.norm(step) < step_tol or decrease < cost_tol:
                    return RefineResult(current, False, initial_cost, cost, it)
                break
            lam *= 10
        if not accepted:
            break
    return RefineResult(current, False, initial_cost, cost, it)


# ---------------------------------------------------------------------------
# LO-RANSAC
# ---------------------------------------------------------------------------

def _adaptive_bound(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    w = min(max(inlier_ratio, 1e-9), 1.0 - 1e-12)
    wk = w**sample_size
    if wk >= 1.0:
        return 0.0
    return math.log(1.0 - confidence) / math.log(1.0 - wk)


def p3p_lo_ransac(corrs, K: Intrinsics, tau: float = 10.0,
                  confidence: float = 0.999, seed: int = 0,
                  max_iter: int = 5000, min_inliers: int = 12,
                  db_id: str = "") -> PoseHypothesis | None:
    """P3P RANSAC with local optimization; None when no model clears the floor.

    Each new best sample triggers a refinement of the current inlier set
    (the LO step); the adaptive iteration bound follows the best inlier
    ratio at the given confidence, hard-capped at `max_iter`. The final
    model is refined once more on its inliers and its support recomputed.
    """
    n = len(corrs)
    if n < 3:
        raise PoseSolverError(f"need at least 3 correspondences, got {n}")
    pixels, points = _corr_arrays(corrs)
    corrs = list(corrs)
    rng = np.random.default_rng(seed)

    best_count = 0
    best_pose = None
    done = 0
    bound = float(max_iter)
    while done < min(bound, max_iter):
        done += 1
        idx = rng.choice(n, size=3, replace=False)
        if _min_triangle_height(points[idx]) <= 1e-9:
            continue
        try:
            sols = solve_p3p([corrs[i] for i in idx], K)
        except PoseSolverError:
            continue
        for sol in sols:
            errs = reprojection_errors(sol, pixels, points, K)
            mask = errs < tau
            count = int(mask.sum())
            if count <= best_count:
                continue
            best_count, best_pose = count, sol
            if count >= 3:
                # LO step: refine on the current consensus set, keep if no worse
                refined = _refine_arrays(sol, pixels[mask], points[mask], K,
                                         huber_delta=tau / 2)
                r_errs = reprojection_errors(refined.pose, pixels, points, K)
                r_count = int((r_errs < tau).sum())
                if r_count >= best_count:
                    best_count, best_pose = r_count, refined.pose
            bound = _adaptive_bound(best_count / n, 3, confidence)

    if best_pose is None or best_count < min_inliers:
        return None

    errs = reprojection_errors(best_pose, pixels, points, K)
    mask = errs < tau
    refined = _refine_arrays(best_pose, pixels[mask], points[mask], K,
                             huber_delta=tau / 2)
    final_errs = reprojection_errors(refined.pose, pixels, points, K)
    final_mask = final_errs < tau
    if int(final_mask.sum()) >= int(mask.sum()):
        best_pose, mask, errs = refined.pose, final_mask, final_errs
    inliers = np.nonzero(mask)[0]
    if inliers.size < min_inliers:
        return None
    return PoseHypothesis(
        db_id=db_id,
        pose=best_pose,
        inlier_indices=tuple(int(i) for i in inliers),
        inlier_count=int(inliers.size),
        mean_reproj_error=float(errs[mask].mean()),
    )
