"""Dense correspondence search and geometric verification between image pairs.

Coarse-grid mutual nearest neighbors seed a restricted fine-grid search;
the pooled fine matches are verified by fitting up to two homographies
with RANSAC, and candidates are re-ranked by total inlier count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import BinaryFeatureGrid, FeatureGrid, hamming_distance


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class CellMatch:
    """One grid-cell correspondence; pixels are grid-cell centers."""

    q_pixel: tuple  # (x, y)
    db_pixel: tuple
    level: str
    distance: float
    q_cell: tuple  # (row, col)
    db_cell: tuple
    stride: int


@dataclass(frozen=True)
class CandidateVerdict:
    """Geometric-verification outcome for one retrieval candidate."""

    db_id: str
    inliers: tuple  # fine-level inlier CellMatches across both homographies
    homography_count: int
    homographies: tuple = field(default=())

    @property
    def score(self) -> int:
        return len(self.inliers)


def _flat_descriptors(grid):
    if isinstance(grid, FeatureGrid):
        return grid.flat().astype(np.float64), "float"
    if isinstance(grid, BinaryFeatureGrid):
        return grid.flat(), "binary"
    raise MatchingError(f"unsupported grid type {type(grid)!r}")


def _distance_matrix(qv, dv, mode):
    if mode == "float":
        d2 = (
            np.sum(qv * qv, axis=1)[:, None]
            - 2.0 * qv @ dv.T
            + np.sum(dv * dv, axis=1)[None, :]
        )
        return np.sqrt(np.maximum(d2, 0.0))
    return hamming_distance(qv[:, None, :], dv[None, :, :]).astype(np.float64)


def _mutual_pairs(dmat):
    """(q, db) index pairs that are each other's nearest neighbor.

    argmin breaks distance ties at the lowest linear cell index.
    """
    nn_q = np.argmin(dmat, axis=1)
    nn_d = np.argmin(dmat, axis=0)
    qi = np.arange(dmat.shape[0])
    keep = nn_d[nn_q] == qi
    return qi[keep], nn_q[keep]


def mutual_nn(qgrid, dbgrid, mode: str | None = None) -> list[CellMatch]:
    """Mutually-nearest matches between two descriptor grids of one level.

    Zero descriptors (empty patches) are excluded from candidacy on both
    sides. The distance metric follows the grid type: L2 for float grids,
    Hamming for bit-packed ones.
    """
    qv, qmode = _flat_descriptors(qgrid)
    dv, dmode = _flat_descriptors(dbgrid)
    if qmode != dmode or (mode is not None and mode != qmode):
        raise MatchingError("query/database grid modes differ")
    if qv.shape[0] == 0 or dv.shape[0] == 0:
        raise MatchingError("empty grid")
    if isinstance(qgrid, FeatureGrid):
        if qgrid.dim != dbgrid.dim:
            raise MatchingError("descriptor dims differ")
    elif qgrid.dim != dbgrid.dim:
        raise MatchingError("descriptor dims differ")

    qmask = qgrid.nonzero_mask()
    dmask = dbgrid.nonzero_mask()
    qidx = np.nonzero(qmask)[0]
    didx = np.nonzero(dmask)[0]
    if qidx.size == 0 or didx.size == 0:
        return []

    dmat = _distance_matrix(qv[qidx], dv[didx], qmode)
    qi, dj = _mutual_pairs(dmat)

    qc = qgrid.cell_centers()
    dc = dbgrid.cell_centers()
    cols_q, cols_d = qgrid.cols, dbgrid.cols
    matches = []
    for a, b in zip(qi, dj):
        la, lb = int(qidx[a]), int(didx[b])
        matches.append(CellMatch(
            q_pixel=(float(qc[la, 0]), float(qc[la, 1])),
            db_pixel=(float(dc[lb, 0]), float(dc[lb, 1])),
            level=qgrid.level,
            distance=float(dmat[a, b]),
            q_cell=(la // cols_q, la % cols_q),
            db_cell=(lb // cols_d, lb % cols_d),
            stride=qgrid.stride,
        ))
    return matches


def refine_fine(coarse_matches, fine_q, fine_db) -> list[CellMatch]:
    """Fine-level matches restricted by the coarse correspondences.

    For each coarse match, mutual NN runs between the fine cells inside the
    query coarse cell's footprint and the db footprint dilated by one
    coarse cell in every direction. Results are pooled and deduplicated per
    query cell, keeping the smallest descriptor distance.
    """
    if not coarse_matches:
        return []
    coarse_stride = coarse_matches[0].stride
    if coarse_stride % fine_q.stride != 0:
        raise MatchingError(
            f"coarse stride {coarse_stride} is not a multiple of fine stride {fine_q.stride}"
        )
    r = coarse_stride // fine_q.stride

    qv, qmode = _flat_descriptors(fine_q)
    dv, _ = _flat_descriptors(fine_db)
    qmask = fine_q.nonzero_mask()
    dmask = fine_db.nonzero_mask()
    qc = fine_q.cell_centers()
    dc = fine_db.cell_centers()

    best: dict[int, CellMatch] = {}
    for cm in coarse_matches:
        R, C = cm.q_cell
        Rd, Cd = cm.db_cell
        q_rows = np.arange(R * r, min((R + 1) * r, fine_q.rows))
        q_cols = np.arange(C * r, min((C + 1) * r, fine_q.cols))
        d_rows = np.arange(max((Rd - 1) * r, 0), min((Rd + 2) * r, fine_db.rows))
        d_cols = np.arange(max((Cd - 1) * r, 0), min((Cd + 2) * r, fine_db.cols))
        if q_rows.size == 0 or q_cols.size == 0 or d_rows.size == 0 or d_cols.size == 0:
            continue
        qlin = (q_rows[:, None] * fine_q.cols + q_cols[None, :]).ravel()
        dlin = (d_rows[:, None] * fine_db.cols + d_cols[None, :]).ravel()
        qlin = qlin[qmask[qlin]]
        dlin = dlin[dmask[dlin]]
        if qlin.size == 0 or dlin.size == 0:
            continue

        dmat = _distance_matrix(qv[qlin], dv[dlin], qmode)
        qi, dj = _mutual_pairs(dmat)
        for a, b in zip(qi, dj):
            gq, gd = int(qlin[a]), int(dlin[b])
            dist = float(dmat[a, b])
            prev = best.get(gq)
            if prev is None or dist < prev.distance:
                best[gq] = CellMatch(
                    q_pixel=(float(qc[gq, 0]), float(qc[gq, 1])),
                    db_pixel=(float(dc[gd, 0]), float(dc[gd, 1])),
                    level="fine",
                    distance=dist,
                    q_cell=(gq // fine_q.cols, gq % fine_q.cols),
                    db_cell=(gd // fine_db.cols, gd % fine_db.cols),
                    stride=fine_q.stride,
                )
    return [best[k] for k in sorted(best)]


# ---------------------------------------------------------------------------
# Homography RANSAC
# ---------------------------------------------------------------------------

def _normalization(pts: np.ndarray) -> np.ndarray:
    """Hartley similarity transform: zero mean, mean distance sqrt(2)."""
    mean = pts.mean(axis=0)
    d = np.linalg.norm(pts - mean, axis=1).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1]])


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Least-squares homography (src -> dst) via normalized DLT; None if degenerate.

    The null vector comes from the 9x9 normal matrix (eigh), which matches
    the SVD solution after Hartley normalization at a fraction of the cost
    for large consensus sets.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    if n < 4:
        return None
    Ts, Td = _normalization(src), _normalization(dst)
    sh = np.column_stack([src, np.ones(n)]) @ Ts.T
    dh = np.column_stack([dst, np.ones(n)]) @ Td.T
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = sh
    A[0::2, 6:9] = -dh[:, 0:1] * sh
    A[1::2, 3:6] = sh
    A[1::2, 6:9] = -dh[:, 1:2] * sh
    try:
        evals, evecs = np.linalg.eigh(A.T @ A)
    except np.linalg.LinAlgError:
        return None
    scale = max(float(evals[-1]), 1e-300)
    if evals[1] / scale < 1e-20:  # rank deficient: collinear sample
        return None
    Hn = evecs[:, 0].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(np.linalg.det(H)) < 1e-12:
        return None
    return H / H[2, 2] if abs(H[2, 2]) > 1e-12 else H


def _fit_homographies_batch(src4: np.ndarray, dst4: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DLT on a batch of minimal samples: (m, 4, 2) x 2 -> (H (m, 3, 3), valid (m,)).

    Normalization uses a fixed shift/scale per sample (mean and RMS extent),
    which is enough to condition 4-point systems.
    """
    m = src4.shape[0]
    ones = np.ones((m, 4, 1))

    def _norm(pts):
        mean = pts.mean(axis=1, keepdims=True)
        d = np.linalg.norm(pts - mean, axis=2).mean(axis=1)
        s = np.where(d > 1e-12, np.sqrt(2.0) / np.maximum(d, 1e-12), 1.0)
        return (pts - mean) * s[:, None, None], mean[:, 0, :], s

    sn, smean, ss = _norm(src4)
    dn, dmean, ds = _norm(dst4)
    sh = np.concatenate([sn, ones], axis=2)
    A = np.zeros((m, 8, 9))
    A[:, 0::2, 0:3] = sh
    A[:, 0::2, 6:9] = -dn[:, :, 0:1] * sh
    A[:, 1::2, 3:6] = sh
    A[:, 1::2, 6:9] = -dn[:, :, 1:2] * sh
    _, s, Vt = np.linalg.svd(A)
    valid = s[:, -2] > 1e-12
    Hn = Vt[:, -1, :].reshape(m, 3, 3)

    # denormalize: H = Td^-1 Hn Ts
    Ts = np.zeros((m, 3, 3))
    Ts[:, 0, 0] = ss
    Ts[:, 1, 1] = ss
    Ts[:, 2, 2] = 1.0
    Ts[:, 0, 2] = -ss * smean[:, 0]
    Ts[:, 1, 2] = -ss * smean[:, 1]
    Tdinv = np.zeros((m, 3, 3))
    inv_ds = 1.0 / ds
    Tdinv[:, 0, 0] = inv_ds
    Tdinv[:, 1, 1] = inv_ds
    Tdinv[:, 2, 2] = 1.0
    Tdinv[:, 0, 2] = dmean[:, 0]
    Tdinv[:, 1, 2] = dmean[:, 1]
    H = Tdinv @ Hn @ Ts
    det = np.linalg.det(H)
    valid &= np.abs(det) > 1e-12
    h22 = H[:, 2, 2]
    scale = np.where(np.abs(h22) > 1e-12, h22, 1.0)
    H = H / scale[:, None, None]
    return H, valid


def _sym_transfer_sq_batch(H: np.ndarray, valid: np.ndarray,
                           src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared symmetric transfer errors, (m, n) float32; invalid models get inf.

    float32 is plenty for inlier counting; the final consensus mask is
    recomputed in float64 by the caller.
    """
    m = H.shape[0]
    n = src.shape[0]
    err = np.full((m, n), np.inf, dtype=np.float32)
    if not np.any(valid):
        return err
    Hv = H[valid].astype(np.float32)
    try:
        Hinv = np.linalg.inv(Hv)
    except np.linalg.LinAlgError:
        return err
    sh = np.column_stack([src, np.ones(n)]).astype(np.float32)
    dh = np.column_stack([dst, np.ones(n)]).astype(np.float32)
    fwd = sh @ Hv.transpose(0, 2, 1)
    bwd = dh @ Hinv.transpose(0, 2, 1)
    wf = fwd[..., 2]
    wb = bwd[..., 2]
    bad = (np.abs(wf) < 1e-12) | (np.abs(wb) < 1e-12)
    wf = np.where(bad, np.float32(1.0), wf)
    wb = np.where(bad, np.float32(1.0), wb)
    ef = np.sum((fwd[..., :2] / wf[..., None] - dst[None].astype(np.float32)) ** 2, axis=2)
    eb = np.sum((bwd[..., :2] / wb[..., None] - src[None].astype(np.float32)) ** 2, axis=2)
    e = np.where(bad, np.float32(np.inf), ef + eb)
    err[valid] = e
    return err


def _sym_transfer_sq(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared symmetric transfer error per correspondence; inf where unmappable."""
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(src.shape[0], np.inf)
    sh = np.column_stack([src, np.ones(src.shape[0])])
    dh = np.column_stack([dst, np.ones(dst.shape[0])])
    fwd = sh @ H.T
    bwd = dh @ Hinv.T
    wf = fwd[:, 2]
    wb = bwd[:, 2]
    bad = (np.abs(wf) < 1e-12) | (np.abs(wb) < 1e-12)
    wf = np.where(bad, 1.0, wf)
    wb = np.where(bad, 1.0, wb)
    ef = np.sum((fwd[:, :2] / wf[:, None] - dst) ** 2, axis=1)
    eb = np.sum((bwd[:, :2] / wb[:, None] - src) ** 2, axis=1)
    err = ef + eb
    return np.where(bad, np.inf, err)


def _adaptive_bound(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    w = min(max(inlier_ratio, 1e-9), 1.0 - 1e-12)
    denom = math.log(1.0 - w**sample_size) if w**sample_size < 1.0 else -math.inf
    if denom == 0.0 or denom == -math.inf:
        return 0.0
    return math.log(1.0 - confidence) / denom


def _ransac_homography(src, dst, tau, confidence, max_iter, rng, chunk: int = 64):
    """Best homography by inlier count; returns (H, inlier mask) or (None, None).

    Minimal samples are drawn and evaluated in vectorized chunks; results
    are consumed in draw order so the adaptive stop matches a sequential
    scan at chunk granularity.
    """
    n = src.shape[0]
    tau_sq = tau * tau
    best_count = 0
    best_H = None
    done = 0
    bound = float(max_iter)
    while done < min(bound, max_iter):
        todo = int(min(chunk, max_iter - done))
        chunk = min(chunk * 2, 512)  # grow batches when the search drags on
        samples = np.stack([rng.choice(n, size=4, replace=False) for _ in range(todo)])
        H_all, valid = _fit_homographies_batch(src[samples], dst[samples])
        err = _sym_transfer_sq_batch(H_all, valid, src, dst)
        counts = (err < tau_sq).sum(axis=1)
        for i in range(todo):
            done += 1
            if counts[i] > best_count:
                best_count = int(counts[i])
                best_H = H_all[i]
                bound = _adaptive_bound(best_count / n, 4, confidence)
            if done >= bound:
                break
    if best_H is None:
        return None, None
    # exact consensus of the winning model, then refit on it; keep the
    # refit when it does not lose support
    best_mask = _sym_transfer_sq(best_H, src, dst) < tau_sq
    best_count = int(best_mask.sum())
    if best_count < 4:
        return None, None
    H_refit = fit_homography_dlt(src[best_mask], dst[best_mask])
    if H_refit is not None:
        mask_refit = _sym_transfer_sq(H_refit, src, dst) < tau_sq
        if int(mask_refit.sum()) >= best_count:
            return H_refit, mask_refit
    return best_H, best_mask


def verify_homographies(matches, tau: float = 8.0, min_inliers: int = 12,
                        seed: int = 0, confidence: float = 0.999,
                        max_iter: int = 2000, db_id: str = "") -> CandidateVerdict:
    """Verify matches by fitting up to two homographies with seeded RANSAC.

    The first homography's inliers are recorded and removed, then a second
    fit runs on the remainder. A fit below `min_inliers` stops the
    sequence; the verdict score is the total recorded inlier count.
    """
    matches = list(matches)
    if len(matches) < 4:
        return CandidateVerdict(db_id=db_id, inliers=(), homography_count=0)

    src = np.array([m.q_pixel for m in matches])
    dst = np.array([m.db_pixel for m in matches])
    rng = np.random.default_rng(seed)

    inliers: list[CellMatch] = []
    homographies = []
    remaining = np.arange(len(matches))
    for _ in range(2):
        if remaining.size < 4:
            break
        H, mask = _ransac_homography(src[remaining], dst[remaining], tau,
                                     confidence, max_iter, rng)
        if H is None or int(mask.sum()) < min_inliers:
            break
        sel = remaining[mask]
        inliers.extend(matches[i] for i in sel)
        homographies.append(H)
        remaining = remaining[~mask]
    return CandidateVerdict(
        db_id=db_id, inliers=tuple(inliers),
        homography_count=len(homographies), homographies=tuple(homographies),
    )


def rerank(verdicts, keep: int = 10) -> list[CandidateVerdict]:
    """Order candidates by descending inlier score, retrieval rank breaking ties."""
    if keep < 1:
        raise MatchingError("keep must be >= 1")
    order = sorted(range(len(verdicts)), key=lambda i: (-verdicts[i].score, i))
    return [verdicts[i] for i in order[:keep]]


def write_match_dump(path, matches, inlier_set=None) -> None:
    """Debug dump, one line per match: qx qy dx dy dist inlierFlag."""
    inlier_ids = {id(m) for m in (inlier_set or ())}
    with open(path, "w", encoding="utf-8") as fh:
        for m in matches:
            flag = 1 if id(m) in inlier_ids else 0
            fh.write(f"{m.q_pixel[0]} {m.q_pixel[1]} {m.db_pixel[0]} "
                     f"{m.db_pixel[1]} {m.distance} {flag}\n")
