"""Pose verification by view synthesis.

The registered RGBD database is splatted into the hypothesized camera with
a per-pixel z-test, holes are filled by two-pass scanline interpolation,
and the hypothesis is scored as the negated median distance between dense
patch descriptors of the query and of the rendering, ignoring regions with
no 3D structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import extract_grid
from .geometry import Intrinsics, Pose, backproject_points


class VerificationError(ValueError):
    pass


@dataclass(frozen=True)
class SynthesizedView:
    """Point-splat rendering; invalid pixels have undefined rgb and infinite z."""

    rgb: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) bool, True where at least one point landed
    zbuf: np.ndarray  # (h, w) float32

    @property
    def size(self) -> tuple[int, int]:
        return (self.rgb.shape[1], self.rgb.shape[0])


@dataclass(frozen=True)
class VerificationScore:
    similarity: float  # negated median descriptor distance, higher is better
    valid_fraction: float
    usable: bool


@dataclass(frozen=True)
class SelectionResult:
    best_index: int
    hypothesis: object
    scores: tuple


def entries_within_radius(entries, center, radius: float):
    center = np.asarray(center, dtype=np.float64)
    return [e for e in entries
            if np.linalg.norm(e.pose.center - center) <= radius]


def _zbuffer_write(zbuf, rgb, mask, pix, z, colors):
    """Depth-test a batch of pixel writes; ties keep the first-written point.

    Within the batch the earliest entry wins among equal depths; against
    the existing buffer a strict test preserves previously written pixels.
    """
    flat_z = zbuf.ravel()
    order = np.lexsort((np.arange(z.size), z, pix))
    spix = pix[order]
    first = np.ones(spix.size, dtype=bool)
    first[1:] = spix[1:] != spix[:-1]
    cand = order[first]
    cpix = pix[cand]
    cz = z[cand]
    upd = cz < flat_z[cpix]
    tgt = cpix[upd]
    flat_z[tgt] = cz[upd]
    rgb.reshape(-1, 3)[tgt] = colors[cand[upd]]
    mask.ravel()[tgt] = True


# per-entry static render data, keyed by entry object identity (entries are
# immutable); holds camera-frame points, depths, and colors of valid pixels
_ENTRY_POINT_CACHE: dict = {}


def _entry_points(e, source_stride: int):
    key = (id(e), source_stride)
    cached = _ENTRY_POINT_CACHE.get(key)
    if cached is not None:
        return cached
    valid = e.depth.validity
    if source_stride > 1:
        keep = np.zeros_like(valid)
        keep[::source_stride, ::source_stride] = True
        valid = valid & keep
    vs, us = np.nonzero(valid)
    z = e.depth.values[vs, us].astype(np.float64)
    xc = np.empty((z.size, 3))
    xc[:, 0] = (us - e.K.cx) * z / e.K.f
    xc[:, 1] = (vs - e.K.cy) * z / e.K.f
    xc[:, 2] = z
    colors = e.rgb[vs, us]
    if z.size:
        lo = xc.min(axis=0)
        hi = xc.max(axis=0)
        corners = np.stack([
            np.where(np.arange(8) & 1, hi[0], lo[0]),
            np.where(np.arange(8) & 2, hi[1], lo[1]),
            np.where(np.arange(8) & 4, hi[2], lo[2]),
        ], axis=1)
    else:
        corners = np.zeros((0, 3))
    if len(_ENTRY_POINT_CACHE) > 512:
        _ENTRY_POINT_CACHE.clear()
    _ENTRY_POINT_CACHE[key] = (xc, z, colors, corners)
    return _ENTRY_POINT_CACHE[key]


def synthesize_view(entries, pose: Pose, K: Intrinsics,
                    source_stride: int = 1, max_splat: int = 5) -> SynthesizedView:
    """Render database points from `pose` with depth-adaptive square splats.

    Every valid-depth database pixel (optionally subsampled by
    `source_stride`, which scales the source point spacing accordingly) is
    back-projected and splatted; a per-pixel z-test keeps the nearest
    point, ties going to the first written.
    """
    entries = list(entries)
    if not entries:
        raise VerificationError("no database entries to render")
    w, h = K.width, K.height
    zbuf = np.full((h, w), np.inf, dtype=np.float32)
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    mask = np.zeros((h, w), dtype=bool)

    for e in entries:
        xc_src, z_src, colors, corners = _entry_points(e, source_stride)
        if z_src.size == 0:
            continue
        # entry camera -> target camera as one rigid transform
        R_rel = pose.R @ e.pose.R.T
        t_rel = pose.t - R_rel @ e.pose.t

        # conservative AABB frustum test: skip entries that cannot reach
        # the image (projection of a z>0 convex set stays inside the hull
        # of its corner projections)
        cc = corners @ R_rel.T + t_rel
        cz = cc[:, 2]
        if np.all(cz <= 1e-9):
            continue
        if np.all(cz > 1e-9):
            cu = K.f * cc[:, 0] / cz + K.cx
            cv = K.f * cc[:, 1] / cz + K.cy
            if (cu.max() < -max_splat or cu.min() > w + max_splat
                    or cv.max() < -max_splat or cv.min() > h + max_splat):
                continue

        xc = xc_src @ R_rel.T + t_rel
        zt = xc[:, 2]
        front = zt > 1e-9
        if not np.any(front):
            continue
        xc, zt, zs = xc[front], zt[front], z_src[front]
        cols = colors[front]

        iu = np.rint(K.f * xc[:, 0] / zt + K.cx).astype(np.int64)
        iv = np.rint(K.f * xc[:, 1] / zt + K.cy).astype(np.int64)
        # splat side from the source point spacing (meters) at its depth
        rho = source_stride * zs / e.K.f
        s = np.clip(np.rint(K.f * rho / zt), 1, max_splat).astype(np.int64)
        near = (iu > -max_splat) & (iu < w + max_splat) \
            & (iv > -max_splat) & (iv < h + max_splat)
        if not np.any(near):
            continue
        iu, iv, zt, s, cols = iu[near], iv[near], zt[near], s[near], cols[near]

        pix_parts, z_parts, col_parts = [], [], []
        for size in range(1, max_splat + 1):
            sel = s == size
            if not np.any(sel):
                continue
            offs = np.arange(size) - (size - 1) // 2
            bu, bv, bz = iu[sel], iv[sel], zt[sel]
            bc = cols[sel]
            for dy in offs:
                for dx in offs:
                    pu = bu + dx
                    pv = bv + dy
                    inb = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
                    if not np.any(inb):
                        continue
                    pix_parts.append(pv[inb] * w + pu[inb])
                    z_parts.append(bz[inb])
                    col_parts.append(bc[inb])
        if not pix_parts:
            continue
        _zbuffer_write(zbuf, rgb, mask,
                       np.concatenate(pix_parts),
                       np.concatenate(z_parts).astype(np.float32),
                       np.concatenate(col_parts))
    return SynthesizedView(rgb=rgb, mask=mask, zbuf=zbuf)


def _scanline_pass(img: np.ndarray, defined: np.ndarray):
    """Per-row linear interpolation between defined pixels, border replication.

    Returns (values (h, w, 3), covered (h, w)); rows without any defined
    pixel stay uncovered.
    """
    h, w = defined.shape
    out = np.zeros((h, w, 3))
    covered = np.zeros((h, w), dtype=bool)
    xs = np.arange(w)
    for row in range(h):
        cols = np.nonzero(defined[row])[0]
        if cols.size == 0:
            continue
        for ch in range(3):
            out[row, :, ch] = np.interp(xs, cols, img[row, cols, ch])
        covered[row] = True
    return out, covered


def fill_holes(view: SynthesizedView) -> np.ndarray:
    """Fully-defined float image from a partial rendering.

    Horizontal and vertical scanline passes each linearly interpolate blank
    runs between valid pixels and replicate at borders; pixels covered by
    both passes take their mean. The procedure repeats on the grown
    validity mask until every pixel is defined (at most a few rounds).
    Valid pixels keep their original values.
    """
    if not np.any(view.mask):
        raise VerificationError("cannot fill a view with no valid pixels")
    img = view.rgb.astype(np.float64)
    defined = view.mask.copy()
    img[~defined] = 0.0

    while not defined.all():
        hvals, hcov = _scanline_pass(img, defined)
        vvals_t, vcov_t = _scanline_pass(img.transpose(1, 0, 2), defined.T)
        vvals = vvals_t.transpose(1, 0, 2)
        vcov = vcov_t.T

        both = hcov & vcov
        new = np.zeros_like(img)
        new[both] = 0.5 * (hvals[both] + vvals[both])
        only_h = hcov & ~vcov
        only_v = vcov & ~hcov
        new[only_h] = hvals[only_h]
        new[only_v] = vvals[only_v]

        fill = (hcov | vcov) & ~defined
        if not np.any(fill):
            raise VerificationError("hole filling stalled")  # unreachable with any valid pixel
        img[fill] = new[fill]
        defined |= fill
    return img.astype(np.float32)


def _cell_valid_fraction(mask: np.ndarray, stride: int, patch: int,
                         rows: int, cols: int) -> np.ndarray:
    s = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1))
    np.cumsum(np.cumsum(mask.astype(np.float64), axis=0), axis=1, out=s[1:, 1:])
    y0 = np.arange(rows) * stride
    x0 = np.arange(cols) * stride
    y1, x1 = y0 + patch, x0 + patch
    block = s[np.ix_(y1, x1)] - s[np.ix_(y0, x1)] - s[np.ix_(y1, x0)] + s[np.ix_(y0, x0)]
    return block / float(patch * patch)


def densepv_distances(query_rgb: np.ndarray, view: SynthesizedView,
                      stride: int = 8, patch: int = 16,
                      cell_valid_floor: float = 0.5):
    """Per-cell descriptor distances between query and hole-filled rendering.

    Returns (distances (rows, cols), participating (rows, cols) bool). A
    cell participates when at least `cell_valid_floor` of its patch pixels
    carry rendered 3D structure.
    """
    qh, qw = query_rgb.shape[:2]
    vh, vw = view.rgb.shape[:2]
    if (qh, qw) != (vh, vw):
        raise VerificationError(f"query {qw}x{qh} and view {vw}x{vh} sizes differ")
    filled = fill_holes(view)
    qgrid = extract_grid(query_rgb, stride, patch)
    rgrid = extract_grid(filled, stride, patch)
    dist = np.linalg.norm(
        qgrid.descriptors.astype(np.float64) - rgrid.descriptors.astype(np.float64),
        axis=-1,
    )
    frac = _cell_valid_fraction(view.mask, stride, patch, qgrid.rows, qgrid.cols)
    return dist, frac >= cell_valid_floor


def densepv_score(query_rgb: np.ndarray, view: SynthesizedView,
                  stride: int = 8, patch: int = 16,
                  cell_valid_floor: float = 0.5,
                  valid_fraction_floor: float = 0.3) -> VerificationScore:
    """Similarity = negated median distance over cells with 3D structure."""
    dist, participating = densepv_distances(query_rgb, view, stride, patch,
                                            cell_valid_floor)
    total = dist.size
    nval = int(participating.sum())
    frac = nval / total if total else 0.0
    if frac < valid_fraction_floor:
        return VerificationScore(similarity=-np.inf, valid_fraction=frac, usable=False)
    sim = -float(np.median(dist[participating]))
    return VerificationScore(similarity=sim, valid_fraction=frac, usable=True)


def select_best(hypotheses, scores) -> SelectionResult:
    """Pick the hypothesis with the best usable similarity.

    Ties prefer the higher DensePE inlier count, then the lower candidate
    rank. With no usable score the fallback is the maximum inlier count.
    """
    hypotheses = list(hypotheses)
    scores = list(scores)
    if not hypotheses:
        raise VerificationError("no hypotheses to select from")
    if len(hypotheses) != len(scores):
        raise VerificationError("hypothesis/score count mismatch")
    usable = [i for i, s in enumerate(scores) if s.usable]
    if usable:
        best = min(usable, key=lambda i: (-scores[i].similarity,
                                          -hypotheses[i].inlier_count, i))
    else:
        best = min(range(len(hypotheses)),
                   key=lambda i: (-hypotheses[i].inlier_count, i))
    return SelectionResult(best_index=best, hypothesis=hypotheses[best],
                           scores=tuple(scores))


def error_heatmap(query_rgb: np.ndarray, view: SynthesizedView,
                  stride: int = 8, patch: int = 16) -> np.ndarray:
    """Per-cell descriptor distance as an upsampled uint8 image (bright = mismatch)."""
    dist, participating = densepv_distances(query_rgb, view, stride, patch)
    vis = np.zeros_like(dist)
    if np.any(participating):
        top = dist[participating].max()
        if top > 0:
            vis = np.where(participating, dist / top, 0.0)
    h, w = query_rgb.shape[:2]
    up = np.repeat(np.repeat(vis, stride, axis=0), stride, axis=1)
    out = np.zeros((h, w))
    oh = min(h, up.shape[0])
    ow = min(w, up.shape[1])
    out[:oh, :ow] = up[:oh, :ow]
    return np.rint(out * 255).astype(np.uint8)
