"""Deterministic synthetic box-room scene with analytic RGBD rendering.

The room is an axis-aligned box whose six walls carry procedural textures
(seeded Gaussian blotches plus a checker pattern; one wall is deliberately
near-uniform). Color and depth are produced by exact ray-plane
intersection, so generated entries come with exact ground truth and the
renderer doubles as an oracle for the view-synthesis stage.

World frame: x/y horizontal, z up; the room spans [0, ex] x [0, ey] x [0, ez].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose
from .scene import DepthMap, Panorama, QueryImage, RgbdEntry, SceneError, equirect_pixel


@dataclass(frozen=True)
class DatabaseGridSpec:
    """Database stations on a horizontal grid, several yaw headings each."""

    nx: int = 3
    ny: int = 3
    height: float = 1.5
    yaw_count: int = 4
    pitch: float = 0.0
    image_size: tuple[int, int] = (256, 192)
    fov: float = 60.0


@dataclass(frozen=True)
class QuerySpec:
    """Held-out query poses with randomized offsets from the database grid.

    Draws whose view is dominated by the deliberately textureless wall are
    rejected and resampled: such views depict nothing localizable, the same
    reason real benchmarks keep only verifiable query poses.
    """

    count: int = 25
    margin: float = 0.8
    height_range: tuple[float, float] = (1.2, 1.8)
    pitch_range: tuple[float, float] = (-10.0, 10.0)
    image_size: tuple[int, int] = (256, 192)
    fov: float = 60.0
    max_featureless_fraction: float = 0.5


@dataclass(frozen=True)
class _WallTexture:
    base: np.ndarray  # (3,) base color
    checker_size: float
    checker_amp: np.ndarray  # (3,)
    tile_amp: float  # per-tile brightness variation
    tile_salt: int
    blob_centers: np.ndarray  # (n, 2) wall-surface coords
    blob_sigmas: np.ndarray  # (n,)
    blob_colors: np.ndarray  # (n, 3)
    flip_a: float = 0.0  # mirror surface coordinate a at this extent if > 0

    def colors(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.flip_a > 0:
            a = self.flip_a - a
        ti = np.floor(a / self.checker_size).astype(np.int64)
        tj = np.floor(b / self.checker_size).astype(np.int64)
        parity = (ti + tj) % 2
        out = self.base + np.where(parity[..., None] == 0, 1.0, -1.0) * self.checker_amp
        # deterministic per-tile brightness makes repeated tiles identifiable,
        # like real floor tiles; a plain checker aliases matching by one period
        h = (ti * 2654435761 + tj * 40503 + self.tile_salt) & 0xFFFFFFFF
        jitter = (h.astype(np.float64) / 0xFFFFFFFF) * 2.0 - 1.0
        out = out + (self.tile_amp * jitter)[..., None]
        d2 = (a[..., None] - self.blob_centers[:, 0]) ** 2 \
            + (b[..., None] - self.blob_centers[:, 1]) ** 2
        w = np.exp(-d2 / (2.0 * self.blob_sigmas**2))
        out = out + w @ self.blob_colors
        return np.clip(out, 0.0, 255.0)


def _make_wall(rng: np.random.Generator, ext_a: float, ext_b: float,
               near_uniform: bool = False, flip_a: float = 0.0) -> _WallTexture:
    base = rng.uniform(70, 185, size=3)
    checker_size = rng.uniform(0.4, 0.8)
    checker_amp = rng.uniform(18, 55, size=3)
    n = 24
    centers = np.column_stack([rng.uniform(0, ext_a, n), rng.uniform(0, ext_b, n)])
    sigmas = rng.uniform(0.15, 0.6, n)
    colors = rng.uniform(-75, 75, size=(n, 3))
    if near_uniform:
        checker_amp = checker_amp * 0.0
        colors = colors * 0.02  # barely-visible blotches: a textureless wall
    return _WallTexture(base, checker_size, checker_amp, centers, sigmas, colors, flip_a)


class SyntheticScene:
    """Box room with textured walls, exact analytic rendering, deterministic in seed."""

    def __init__(self, seed: int, extent: tuple[float, float, float] = (6.0, 6.0, 3.0),
                 confusers: bool = False):
        ex, ey, ez = extent
        if not (ex > 0 and ey > 0 and ez > 0):
            raise SceneError("room extent must be positive")
        self.seed = int(seed)
        self.extent = (float(ex), float(ey), float(ez))
        self.confusers = bool(confusers)
        rng = np.random.default_rng(self.seed)
        # wall order: x=0, x=ex, y=0, y=ey, z=0 (floor), z=ez (ceiling)
        w0 = _make_wall(rng, ey, ez)
        w1 = _make_wall(rng, ey, ez)
        w2 = _make_wall(rng, ex, ez)
        w3 = _make_wall(rng, ex, ez, near_uniform=not confusers)
        w4 = _make_wall(rng, ex, ey)
        w5 = _make_wall(rng, ex, ey, near_uniform=confusers)
        if confusers:
            # duplicated (mirrored) textures on both facing wall pairs
            w1 = _WallTexture(w0.base, w0.checker_size, w0.checker_amp,
                              w0.blob_centers, w0.blob_sigmas, w0.blob_colors, flip_a=ey)
            w3 = _WallTexture(w2.base, w2.checker_size, w2.checker_amp,
                              w2.blob_centers, w2.blob_sigmas, w2.blob_colors, flip_a=ex)
        self.walls = [w0, w1, w2, w3, w4, w5]
        self.featureless_walls = (5,) if confusers else (3,)
        # plane k: normal axis and offset; interior points satisfy 0 < x_axis < ext
        self._plane_axis = np.array([0, 0, 1, 1, 2, 2])
        self._plane_off = np.array([0.0, ex, 0.0, ey, 0.0, ez])

    # -- geometry ----------------------------------------------------------

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=np.float64)
        ex, ey, ez = self.extent
        lo = margin
        return bool(
            lo <= p[0] <= ex - lo and lo <= p[1] <= ey - lo and lo <= p[2] <= ez - lo
        )

    def trace(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest ray-wall intersections for rays from an interior origin.

        dirs is (n, 3) and need not be normalized; the returned t is the ray
        parameter (equal to z-depth when dirs has unit camera-z component).
        Returns (t (n,), plane index (n,), points (n, 3)).
        """
        if not self.contains(origin):
            raise SceneError(f"camera at {origin} is outside the room")
        dirs = np.asarray(dirs, dtype=np.float64)
        n = dirs.shape[0]
        t_all = np.full((6, n), np.inf)
        for k in range(6):
            axis = self._plane_axis[k]
            denom = dirs[:, axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (self._plane_off[k] - origin[axis]) / denom
            t_all[k] = np.where((np.abs(denom) > 1e-15) & (t > 1e-9), t, np.inf)
        plane = np.argmin(t_all, axis=0)
        t = t_all[plane, np.arange(n)]
        points = origin[None, :] + t[:, None] * dirs
        return t, plane, points

    def wall_colors(self, plane: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Texture colors (float 0..255) at wall points, per intersected plane."""
        out = np.empty((points.shape[0], 3))
        coord_ab = {0: (1, 2), 1: (1, 2), 2: (0, 2), 3: (0, 2), 4: (0, 1), 5: (0, 1)}
        for k in range(6):
            sel = plane == k
            if not np.any(sel):
                continue
            ia, ib = coord_ab[k]
            out[sel] = self.walls[k].colors(points[sel, ia], points[sel, ib])
        return out

    def distance_to_walls(self, points: np.ndarray) -> np.ndarray:
        """Min absolute distance from each point to any of the six wall planes."""
        pts = np.asarray(points, dtype=np.float64)
        d = np.abs(pts[:, self._plane_axis] - self._plane_off[None, :])
        return d.min(axis=1)

    def wall_fractions(self, pose: Pose, K: Intrinsics, step: int = 16) -> np.ndarray:
        """Fraction of the view falling on each wall, from a subsampled render."""
        us, vs = np.meshgrid(np.arange(0, K.width, step, dtype=np.float64),
                             np.arange(0, K.height, step, dtype=np.float64))
        rays = np.stack([(us - K.cx) / K.f, (vs - K.cy) / K.f,
                         np.ones_like(us)], axis=-1).reshape(-1, 3)
        _, plane, _ = self.trace(pose.center, rays @ pose.R)
        return np.bincount(plane, minlength=6) / plane.size

    # -- rendering ---------------------------------------------------------

    def render(self, pose: Pose, K: Intrinsics):
        """Exact render: (rgb uint8 (h, w, 3), depth float32 (h, w) z-depth)."""
        w, h = K.width, K.height
        us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        rays_c = np.stack(
            [(us - K.cx) / K.f, (vs - K.cy) / K.f, np.ones_like(us)], axis=-1
        ).reshape(-1, 3)
        dirs = rays_c @ pose.R  # camera rays in world frame
        t, plane, points = self.trace(pose.center, dirs)
        colors = self.wall_colors(plane, points)
        rgb = np.rint(colors).astype(np.uint8).reshape(h, w, 3)
        depth = t.astype(np.float32).reshape(h, w)  # rays have unit camera z
        return rgb, depth

    def render_entry(self, entry_id: str, pose: Pose, K: Intrinsics) -> RgbdEntry:
        rgb, depth = self.render(pose, K)
        return RgbdEntry(id=entry_id, rgb=rgb, depth=DepthMap(depth), K=K, pose=pose)

    def render_panorama(self, pano_id: str, center, size: tuple[int, int] = (512, 256)) -> Panorama:
        """Equirectangular render from an interior point (identity heading)."""
        w, h = size
        js, is_ = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        theta = 2 * np.pi * js / w - np.pi
        phi = np.pi / 2 - np.pi * is_ / h
        # panorama camera frame: x right, y down, z forward (azimuth 0)
        dirs_c = np.stack(
            [np.cos(phi) * np.sin(theta), -np.sin(phi), np.cos(phi) * np.cos(theta)],
            axis=-1,
        ).reshape(-1, 3)
        center = np.asarray(center, dtype=np.float64)
        pose = _pano_pose(center)
        dirs_w = dirs_c @ pose.R
        t, plane, points = self.trace(center, dirs_w)
        colors = self.wall_colors(plane, points)
        rng_depth = t  # dirs are unit length, so t is range
        return Panorama(
            id=pano_id,
            rgb=np.rint(colors).astype(np.uint8).reshape(h, w, 3),
            depth=rng_depth.astype(np.float32).reshape(h, w),
            pose=pose,
        )


def _pano_pose(center: np.ndarray) -> Pose:
    # heading along +x, down along -z (matches look_pose(yaw=0, pitch=0))
    return look_pose(center, yaw=0.0, pitch=0.0)


def look_pose(center, yaw: float, pitch: float) -> Pose:
    """World-to-camera pose at `center` with heading yaw and elevation pitch (degrees).

    yaw 0 faces +x, yaw 90 faces +y; positive pitch looks up. The camera
    x-axis stays horizontal.
    """
    cy, sy = math.cos(math.radians(yaw)), math.sin(math.radians(yaw))
    cp, sp = math.cos(math.radians(pitch)), math.sin(math.radians(pitch))
    forward = np.array([cp * cy, cp * sy, sp])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    down /= np.linalg.norm(down)
    R = np.vstack([right, down, forward])
    center = np.asarray(center, dtype=np.float64)
    return Pose(R, -R @ center)


def _fov_intrinsics(image_size: tuple[int, int], fov: float) -> Intrinsics:
    w, h = image_size
    f = (w / 2.0) / math.tan(math.radians(fov) / 2.0)
    return Intrinsics(f=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)


def generate_synthetic_scene(
    seed: int,
    extent: tuple[float, float, float] = (6.0, 6.0, 3.0),
    db_spec: DatabaseGridSpec = DatabaseGridSpec(),
    query_spec: QuerySpec = QuerySpec(),
    confusers: bool = False,
):
    """Deterministic (database, queries, scene) for desk-scale experiments.

    Database poses sit on the station grid; query poses are held out with
    seeded random offsets and carry exact ground truth and true focals.
    """
    scene = SyntheticScene(seed, extent, confusers=confusers)
    ex, ey, ez = scene.extent
    Kdb = _fov_intrinsics(db_spec.image_size, db_spec.fov)

    database = []
    for iy in range(db_spec.ny):
        for ix in range(db_spec.nx):
            cx = ex * (ix + 1) / (db_spec.nx + 1)
            cyy = ey * (iy + 1) / (db_spec.ny + 1)
            center = np.array([cx, cyy, db_spec.height])
            if not scene.contains(center):
                raise SceneError(f"database station {center} outside the room")
            for iyaw in range(db_spec.yaw_count):
                yaw = 360.0 * iyaw / db_spec.yaw_count
                pose = look_pose(center, yaw, db_spec.pitch)
                eid = f"db_s{iy * db_spec.nx + ix:02d}_y{int(yaw):03d}"
                database.append(scene.render_entry(eid, pose, Kdb))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    Kq = _fov_intrinsics(query_spec.image_size, query_spec.fov)
    queries = []
    m = query_spec.margin
    for i in range(query_spec.count):
        pose = None
        for _ in range(200):
            center = np.array([
                rng.uniform(m, ex - m),
                rng.uniform(m, ey - m),
                rng.uniform(*query_spec.height_range),
            ])
            if not scene.contains(center):
                raise SceneError(f"query camera {center} outside the room")
            yaw = rng.uniform(0.0, 360.0)
            pitch = rng.uniform(*query_spec.pitch_range)
            candidate = look_pose(center, yaw, pitch)
            fracs = scene.wall_fractions(candidate, Kq)
            if fracs[list(scene.featureless_walls)].sum() <= query_spec.max_featureless_fraction:
                pose = candidate
                break
        if pose is None:
            raise SceneError("could not draw a query view with localizable content")
        rgb, _ = scene.render(pose, Kq)
        queries.append(QueryImage(id=f"q{i:03d}", rgb=rgb, f=Kq.f, gt_pose=pose))
    return database, queries, scene


def view_overlap(scene: SyntheticScene, pose_q: Pose, K_q: Intrinsics,
                 entry: RgbdEntry, step: int = 8, depth_tol: float = 0.02) -> float:
    """Fraction of query pixels whose surface point is visible in the entry.

    Oracle used by retrieval tests: a query point counts as covered when it
    projects inside the entry's image and its depth agrees with the entry's
    stored depth within a relative tolerance (occlusion test).
    """
    w, h = K_q.width, K_q.height
    us, vs = np.meshgrid(np.arange(0, w, step, dtype=np.float64),
                         np.arange(0, h, step, dtype=np.float64))
    rays_c = np.stack([(us - K_q.cx) / K_q.f, (vs - K_q.cy) / K_q.f,
                       np.ones_like(us)], axis=-1).reshape(-1, 3)
    dirs = rays_c @ pose_q.R
    _, _, points = scene.trace(pose_q.center, dirs)

    xc = entry.pose.transform(points)
    z = xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    u = entry.K.f * xc[:, 0] / zs + entry.K.cx
    v = entry.K.f * xc[:, 1] / zs + entry.K.cy
    inside = ok & (u >= 0) & (u <= entry.K.width - 1) & (v >= 0) & (v <= entry.K.height - 1)
    iu = np.clip(np.rint(u).astype(np.int64), 0, entry.K.width - 1)
    iv = np.clip(np.rint(v).astype(np.int64), 0, entry.K.height - 1)
    stored = entry.depth.values[iv, iu]
    visible = inside & (stored > 0) & (np.abs(stored - z) <= depth_tol * np.maximum(z, 1e-9))
    return float(np.mean(visible))
