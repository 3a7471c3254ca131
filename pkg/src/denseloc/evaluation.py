"""Localization metrics: thresholded success rates, medians, edge reprojection check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .features import to_grayscale
from .geometry import PoseError

DEFAULT_THRESHOLDS = tuple(np.arange(0.25, 2.25, 0.25))


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RateCurve:
    """Percent of queries within each distance threshold, gated by angular error."""

    thresholds: tuple  # meters, ascending
    angle_gate: float  # degrees
    rates: tuple  # percent, aligned with thresholds

    def __post_init__(self):
        if any(b < a for a, b in zip(self.rates, self.rates[1:])):
            raise EvaluationError("rates must be non-decreasing in the threshold")
        if any(not 0.0 <= r <= 100.0 for r in self.rates):
            raise EvaluationError("rates must lie in [0, 100]")

    def as_rows(self):
        return list(zip(self.thresholds, self.rates))

    def format_table(self) -> str:
        lines = [f"threshold(m)  rate(%)  [angle gate {self.angle_gate:g} deg]"]
        for t, r in self.as_rows():
            lines.append(f"{t:12.2f}  {r:7.1f}")
        return "\n".join(lines)


def localized_rate(errors, thresholds=DEFAULT_THRESHOLDS,
                   angle_gate: float = 10.0) -> RateCurve:
    """Rate of queries with positional error <= d and angular error <= gate."""
    errors = list(errors)
    if not errors:
        raise EvaluationError("no error records")
    pos = np.array([e.positional for e in errors])
    ang = np.array([e.angular for e in errors])
    gated = ang <= angle_gate
    rates = tuple(
        float(100.0 * np.mean((pos <= d) & gated)) for d in thresholds
    )
    return RateCurve(thresholds=tuple(float(t) for t in thresholds),
                     angle_gate=float(angle_gate), rates=rates)


def _lower_median(values: np.ndarray) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return float(ordered[(len(ordered) - 1) // 2])


def median_errors(errors) -> tuple[float, float]:
    """Componentwise medians (lower of the two middles for even counts)."""
    errors = list(errors)
    if not errors:
        raise EvaluationError("no error records")
    return (
        _lower_median([e.positional for e in errors]),
        _lower_median([e.angular for e in errors]),
    )


@dataclass(frozen=True)
class EdgeCheckResult:
    median_px: float | None
    accepted: bool
    points_used: int
    points_dropped: int


def edge_reprojection_check(query_rgb: np.ndarray, points_px: np.ndarray,
                            gross_cutoff: float = 20.0, accept_px: float = 5.0,
                            edge_percentile: float = 90.0) -> EdgeCheckResult:
    """Median distance from projected database points to the nearest image edge.

    Edges are pixels whose gradient magnitude reaches the given percentile.
    Point-to-edge distances use the exact Euclidean distance transform at the
    point's nearest pixel; distances beyond `gross_cutoff` are dropped as
    gross errors before taking the median, and the pose is accepted when the
    median stays below `accept_px`.
    """
    gray = to_grayscale(query_rgb)
    h, w = gray.shape
    pts = np.asarray(points_px, dtype=np.float64).reshape(-1, 2)
    iu = np.rint(pts[:, 0]).astype(np.int64)
    iv = np.rint(pts[:, 1]).astype(np.int64)
    inside = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    if not np.any(inside):
        raise EvaluationError("no projected point falls inside the image")

    dy, dx = np.gradient(gray)
    mag = np.hypot(dx, dy)
    # the percentile can be 0 on sparsely textured images; an edge also
    # needs a nonzero gradient or the whole image would qualify
    edges = (mag >= np.percentile(mag, edge_percentile)) & (mag > 0)
    if not np.any(edges):
        return EdgeCheckResult(None, False, 0, int(inside.sum()))
    dist = distance_transform_edt(~edges)

    d = dist[iv[inside], iu[inside]]
    kept = d[d <= gross_cutoff]
    dropped = int(d.size - kept.size)
    if kept.size == 0:
        return EdgeCheckResult(None, False, 0, dropped)
    med = float(np.median(kept))
    return EdgeCheckResult(med, med < accept_px, int(kept.size), dropped)


def errors_from_records(records) -> list[PoseError]:
    """PoseErrors of successfully localized queries with ground truth.

    Failed queries with ground truth count as misses: they are mapped to an
    infinite error so rate curves treat them as never localized.
    """
    out = []
    for r in records:
        if r.error is not None:
            out.append(r.error)
        elif r.has_ground_truth and r.pose is None:
            out.append(PoseError(positional=float("1e18"), angular=180.0))
    return out
