"""RGBD database and query storage: types, file formats, panorama cutouts.

Depth maps use z-depth in meters along the camera optical axis; 0 marks an
invalid pixel. Panoramas are equirectangular with range (distance along the
viewing ray) as their depth channel.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import GeometryError, Intrinsics, Pose, pose_from_numbers, pose_to_numbers

DEPTH_MAGIC = b"IDPT"


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class DepthMap:
    """Row-major per-pixel z-depth in meters; 0 encodes invalid."""

    values: np.ndarray  # (height, width) float32

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise SceneError("depth map must be 2-D")
        # normalize: non-finite and negative depths become the invalid marker
        vals = np.where(np.isfinite(vals) & (vals > 0), vals, 0.0).astype(np.float32)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def validity(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True)
class RgbdEntry:
    """One database image: color, depth, intrinsics, registered pose."""

    id: str
    rgb: np.ndarray  # (height, width, 3) uint8
    depth: DepthMap
    K: Intrinsics
    pose: Pose

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise SceneError(f"entry {self.id}: rgb must be HxWx3 uint8")
        if rgb.shape[:2] != self.depth.values.shape:
            raise SceneError(
                f"entry {self.id}: rgb {rgb.shape[:2]} and depth "
                f"{self.depth.values.shape} dimensions differ"
            )
        if (self.K.width, self.K.height) != (rgb.shape[1], rgb.shape[0]):
            raise SceneError(f"entry {self.id}: intrinsics size does not match image")
        rgb.setflags(write=False)
        object.__setattr__(self, "rgb", rgb)


@dataclass(frozen=True)
class Panorama:
    """Equirectangular RGBD panorama; full 360x180 coverage (width = 2 x height)."""

    id: str
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 range in meters, 0 invalid
    pose: Pose

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.float32)
        if rgb.shape[:2] != depth.shape:
            raise SceneError(f"panorama {self.id}: rgb/depth dimensions differ")
        if rgb.shape[1] != 2 * rgb.shape[0]:
            raise SceneError(f"panorama {self.id}: width must be twice height")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class QueryImage:
    """RGB query with known focal length and optional ground-truth pose."""

    id: str
    rgb: np.ndarray
    f: float
    gt_pose: Pose | None = None

    def __post_init__(self):
        if not self.f > 0:
            raise SceneError(f"query {self.id}: focal length must be positive")
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise SceneError(f"query {self.id}: rgb must be HxWx3 uint8")
        object.__setattr__(self, "rgb", rgb)

    @property
    def intrinsics(self) -> Intrinsics:
        h, w = self.rgb.shape[:2]
        return Intrinsics(f=self.f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_depth(path, depth: DepthMap) -> None:
    """Binary depth: "IDPT", u32 width, u32 height, float32 row-major, little-endian."""
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", depth.width, depth.height))
        fh.write(np.ascontiguousarray(depth.values, dtype="<f4").tobytes())


def read_depth(path) -> DepthMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DEPTH_MAGIC:
            raise SceneError(f"{path}: bad depth magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise SceneError(f"{path}: truncated depth header")
        w, h = struct.unpack("<II", header)
        raw = fh.read(w * h * 4)
        if len(raw) != w * h * 4:
            raise SceneError(f"{path}: truncated depth payload")
        if fh.read(1):
            raise SceneError(f"{path}: trailing bytes in depth file")
    return DepthMap(np.frombuffer(raw, dtype="<f4").reshape(h, w))


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def save_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_database(manifest_path) -> list[RgbdEntry]:
    """Load RGBD entries listed in a JSON manifest, in manifest order.

    Manifest: array of {id, rgb_path, depth_path, fx, cx, cy, pose} with
    paths relative to the manifest location and pose as 12 numbers
    (rotation row-major, then translation).
    """
    manifest_path = Path(manifest_path)
    try:
        items = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SceneError(f"cannot read manifest {manifest_path}: {e}") from e
    if not isinstance(items, list):
        raise SceneError(f"{manifest_path}: manifest must be a JSON array")
    base = manifest_path.parent
    entries = []
    for item in items:
        eid = item.get("id", "<missing id>")
        try:
            rgb = load_image(base / item["rgb_path"])
            depth = read_depth(base / item["depth_path"])
            K = Intrinsics(
                f=float(item["fx"]), cx=float(item["cx"]), cy=float(item["cy"]),
                width=rgb.shape[1], height=rgb.shape[0],
            )
            pose = pose_from_numbers(item["pose"])
            entries.append(RgbdEntry(id=str(item["id"]), rgb=rgb, depth=depth, K=K, pose=pose))
        except (KeyError, OSError, GeometryError, SceneError, ValueError) as e:
            raise SceneError(f"entry {eid!r}: {e}") from e
    return entries


def load_queries(manifest_path) -> list[QueryImage]:
    """Query manifest: array of {id, rgb_path, f, gt_pose?}."""
    manifest_path = Path(manifest_path)
    try:
        items = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SceneError(f"cannot read manifest {manifest_path}: {e}") from e
    base = manifest_path.parent
    queries = []
    for item in items:
        qid = item.get("id", "<missing id>")
        try:
            rgb = load_image(base / item["rgb_path"])
            gt = pose_from_numbers(item["gt_pose"]) if item.get("gt_pose") else None
            queries.append(QueryImage(id=str(item["id"]), rgb=rgb, f=float(item["f"]), gt_pose=gt))
        except (KeyError, OSError, GeometryError, SceneError, ValueError) as e:
            raise SceneError(f"query {qid!r}: {e}") from e
    return queries


def write_database(dirpath, entries) -> Path:
    """Write entries as PNG + depth files plus manifest.json; returns the manifest path."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    items = []
    for e in entries:
        save_image(dirpath / f"{e.id}.png", e.rgb)
        write_depth(dirpath / f"{e.id}.depth", e.depth)
        items.append({
            "id": e.id,
            "rgb_path": f"{e.id}.png",
            "depth_path": f"{e.id}.depth",
            "fx": e.K.f, "cx": e.K.cx, "cy": e.K.cy,
            "pose": pose_to_numbers(e.pose),
        })
    path = dirpath / "manifest.json"
    path.write_text(json.dumps(items, indent=1), encoding="utf-8")
    return path


def write_queries(dirpath, queries) -> Path:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    items = []
    for q in queries:
        save_image(dirpath / f"{q.id}.png", q.rgb)
        item = {"id": q.id, "rgb_path": f"{q.id}.png", "f": q.f}
        if q.gt_pose is not None:
            item["gt_pose"] = pose_to_numbers(q.gt_pose)
        items.append(item)
    path = dirpath / "queries.json"
    path.write_text(json.dumps(items, indent=1), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Panorama cutouts
# ---------------------------------------------------------------------------

def _rot_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def _rot_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])


def equirect_pixel(theta: np.ndarray, phi: np.ndarray, width: int, height: int):
    """Continuous pixel coordinates for azimuth theta, elevation phi (radians).

    Pixel (i, j) sits exactly at theta = 2*pi*j/W - pi, phi = pi/2 - pi*i/H,
    so azimuth 0 / elevation 0 lands on pixel (H/2, W/2).
    """
    u = (theta + np.pi) * width / (2 * np.pi)
    v = (np.pi / 2 - phi) * height / np.pi
    return u, v


def _bilinear_wrap(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear sample with horizontal wrap and vertical clamp."""
    h, w = img.shape[:2]
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0
    j1 = (j0 + 1) % w
    j0 = j0 % w
    i0c = np.clip(i0, 0, h - 1)
    i1c = np.clip(i0 + 1, 0, h - 1)
    img_f = img.astype(np.float64)
    top = img_f[i0c, j0] * (1 - fu)[..., None] + img_f[i0c, j1] * fu[..., None]
    bot = img_f[i1c, j0] * (1 - fu)[..., None] + img_f[i1c, j1] * fu[..., None]
    return top * (1 - fv)[..., None] + bot * fv[..., None]


def _nearest_wrap(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    j = np.rint(u).astype(np.int64) % w
    i = np.clip(np.rint(v).astype(np.int64), 0, h - 1)
    return img[i, j]


def cutout_from_panorama(p: Panorama, yaw: float, pitch: float, fov: float,
                         size: tuple[int, int] = (1600, 1200)) -> RgbdEntry:
    """Perspective RGBD cutout of an equirectangular panorama.

    yaw/pitch/fov in degrees; size is (width, height). Color is sampled
    bilinearly, depth nearest-neighbor (interpolating depth across occlusion
    edges would invent geometry). Panorama range is converted to z-depth in
    the cutout frame.
    """
    if not 0 < fov < 180:
        raise SceneError(f"fov must lie in (0, 180), got {fov}")
    w, h = size
    f = (w / 2.0) / math.tan(math.radians(fov) / 2.0)
    K = Intrinsics(f=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)

    # cutout camera axes expressed in the panorama frame
    R_pc = _rot_y(yaw) @ _rot_x(pitch)
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays = np.stack([(us - K.cx) / f, (vs - K.cy) / f, np.ones_like(us)], axis=-1)
    rays_p = rays @ R_pc.T

    theta = np.arctan2(rays_p[..., 0], rays_p[..., 2])
    phi = np.arctan2(-rays_p[..., 1], np.hypot(rays_p[..., 0], rays_p[..., 2]))
    pu, pv = equirect_pixel(theta, phi, p.rgb.shape[1], p.rgb.shape[0])

    rgb = np.rint(np.clip(_bilinear_wrap(p.rgb, pu, pv), 0, 255)).astype(np.uint8)
    rng_range = _nearest_wrap(p.depth, pu, pv).astype(np.float64)
    z = np.where(rng_range > 0, rng_range / np.linalg.norm(rays, axis=-1), 0.0)

    pose = Pose(R_pc.T, np.zeros(3)).compose(p.pose)
    cid = f"{p.id}_y{int(round(yaw)) % 360:03d}_p{int(round(pitch)):+03d}"
    return RgbdEntry(id=cid, rgb=rgb, depth=DepthMap(z.astype(np.float32)), K=K, pose=pose)


def panorama_cutouts(p: Panorama, yaw_step: float = 30.0,
                     pitches: tuple = (-30.0, 0.0, 30.0), fov: float = 60.0,
                     size: tuple[int, int] = (1600, 1200)) -> list[RgbdEntry]:
    """Regular cutout grid: yaw stations every `yaw_step` degrees at each pitch."""
    yaws = np.arange(0.0, 360.0, yaw_step)
    return [
        cutout_from_panorama(p, yaw, pitch, fov, size)
        for yaw in yaws for pitch in pitches
    ]
