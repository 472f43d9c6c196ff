"""Registration accuracy measures: TRE with a transverse/axial split and
centerline distance between index-corresponding resampled polylines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import ErrorStats, error_stats

CENTERLINE_POINTS = 1000
_EQUAL_CHORD_ITERS = 50


@dataclass(frozen=True)
class LandmarkSet:
    fixed: np.ndarray
    moving: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        f = np.array(self.fixed, dtype=float).reshape(-1, 3)
        m = np.array(self.moving, dtype=float).reshape(-1, 3)
        if f.shape != m.shape or len(f) < 1:
            raise ValueError("landmark set needs >= 1 pair of equal-length point lists")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
            raise ValueError("landmarks must be finite")
        labels = tuple(self.labels) or tuple(f"L{i}" for i in range(len(f)))
        if len(labels) != len(f):
            raise ValueError("one label per landmark pair")
        object.__setattr__(self, "fixed", f)
        object.__setattr__(self, "moving", m)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.fixed)


@dataclass
class TREResult:
    total: ErrorStats
    transverse: ErrorStats
    axial: ErrorStats
    labels: tuple = ()

    def as_dict(self) -> dict:
        rows = [
            {"label": lab, "total": t, "transverse": tr, "axial": ax}
            for lab, t, tr, ax in zip(
                self.labels, self.total.per_point, self.transverse.per_point, self.axial.per_point
            )
        ]
        summary = {k: {"mean": s.mean, "std": s.std} for k, s in
                   (("total", self.total), ("transverse", self.transverse), ("axial", self.axial))}
        return {"landmarks": rows, "summary": summary}


def compute_tre(landmarks: LandmarkSet, T=None, axis=(0.0, 0.0, 1.0)) -> TREResult:
    """TRE of ``fixed - T(moving)`` split along ``axis`` (axial) and across it.

    The split is done per landmark, then averaged.
    """
    a = np.asarray(axis, dtype=float)
    if a.shape != (3,) or abs(np.linalg.norm(a) - 1.0) > 1e-9:
        raise ValueError("axis must be a unit 3-vector")
    moved = landmarks.moving if T is None else T.apply(landmarks.moving)
    e = landmarks.fixed - moved
    along = e @ a
    axial = np.abs(along)
    transverse = np.linalg.norm(e - np.outer(along, a), axis=1)
    total = np.linalg.norm(e, axis=1)
    return TREResult(error_stats(total), error_stats(transverse), error_stats(axial), landmarks.labels)


@dataclass(frozen=True)
class Polyline:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(v) < 2:
            raise ValueError("polyline needs at least 2 vertices")
        if not np.all(np.isfinite(v)):
            raise ValueError("polyline vertices must be finite")
        object.__setattr__(self, "vertices", v)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    def reversed(self) -> "Polyline":
        return Polyline(self.vertices[::-1])


def resample_polyline(line: Polyline, n: int = CENTERLINE_POINTS) -> Polyline:
    """``n`` vertices on ``line``, equally spaced along the output's own arc length.

    Points start at uniform arc-length positions on the input and are then
    nudged along it until all output chords are equal, which makes the
    operation idempotent. Endpoints are kept exactly.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    seg = line.segment_lengths
    keep = np.concatenate([[True], seg > 0])
    v = line.vertices[keep]
    seg = seg[seg > 0]
    if len(v) < 2 or seg.sum() <= 0:
        raise ValueError("polyline has zero length")
    s = np.concatenate([[0.0], np.cumsum(seg)])

    def at(pos):
        return np.column_stack([np.interp(pos, s, v[:, d]) for d in range(3)])

    pos = np.linspace(0.0, s[-1], n)
    pts = at(pos)
    for _ in range(_EQUAL_CHORD_ITERS):
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.ptp(chords) <= 1e-13 * s[-1]:
            break
        cum = np.concatenate([[0.0], np.cumsum(chords)])
        pos = np.interp(np.linspace(0.0, cum[-1], n), cum, pos)
        pts = at(pos)
    pts[0], pts[-1] = v[0], v[-1]
    return Polyline(pts)


@dataclass
class CenterlineDistance:
    mean: float
    reversed: bool
    per_point: np.ndarray = field(repr=False)


def centerline_distance(a: Polyline, b: Polyline, n: int = CENTERLINE_POINTS) -> CenterlineDistance:
    """Mean distance between index-corresponding points after resampling both.

    If traversing ``b`` backwards pairs the curves more closely, the
    reversed pairing is used and flagged.
    """
    ra = resample_polyline(a, n).vertices
    rb = resample_polyline(b, n).vertices
    d_fwd = np.linalg.norm(ra - rb, axis=1)
    d_rev = np.linalg.norm(ra - rb[::-1], axis=1)
    if d_rev.mean() < d_fwd.mean():
        return CenterlineDistance(float(d_rev.mean()), True, d_rev)
    return CenterlineDistance(float(d_fwd.mean()), False, d_fwd)


def closest_point_distance(a: Polyline, b: Polyline, n: int = CENTERLINE_POINTS) -> float:
    """Symmetric mean closest-point distance; a separate, non-default statistic."""
    from scipy.spatial import cKDTree

    ra = resample_polyline(a, n).vertices
    rb = resample_polyline(b, n).vertices
    da = cKDTree(rb).query(ra)[0]
    db = cKDTree(ra).query(rb)[0]
    return float((da.mean() + db.mean()) / 2.0)
