"""Stereo pinhole projection, DLT triangulation and projection-error statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import ProjectionMatrix

DEGENERATE_SV_RATIO = 1e-10


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class StereoRig:
    left: ProjectionMatrix
    right: ProjectionMatrix
    image_size: tuple = (960, 540)

    def __post_init__(self):
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ValueError("image_size must be two positive integers (width, height)")
        if self.left.source != self.right.source:
            raise ValueError("left and right projections must share a source frame")


def project(P: ProjectionMatrix, points) -> tuple[np.ndarray, np.ndarray]:
    """Pixels ``(u, v)`` of 3D points and a flag for positive projective depth."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    h = p @ P.matrix[:, :3].T + P.matrix[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[:, :2] / h[:, 2:3]
    return uv, h[:, 2] > 0


def triangulate_point(P1: np.ndarray, P2: np.ndarray, x1, x2) -> np.ndarray:
    """Linear (DLT) two-view triangulation of one point.

    Rows of the 4x4 system are normalised, which makes the result
    independent of the overall scale of either projection matrix.
    """
    u1, v1 = x1
    u2, v2 = x2
    A = np.array([u1 * P1[2] - P1[0], v1 * P1[2] - P1[1], u2 * P2[2] - P2[0], v2 * P2[2] - P2[1]])
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[2] < DEGENERATE_SV_RATIO * s[0]:
        raise DegenerateGeometryError("rays are (near) parallel; triangulation is undetermined")
    X = Vt[-1]
    return X[:3] / X[3]


@dataclass
class Triangulation:
    points: np.ndarray
    reprojection_rms: np.ndarray


def triangulate(rig: StereoRig, left_px, right_px) -> Triangulation:
    """Triangulate matched pixel lists; rms reprojection error per point (px)."""
    L = np.atleast_2d(np.asarray(left_px, float))
    R = np.atleast_2d(np.asarray(right_px, float))
    if L.shape != R.shape:
        raise ValueError("left and right pixel lists differ in length")
    if not (np.all(np.isfinite(L)) and np.all(np.isfinite(R))):
        raise ValueError("pixel coordinates must be finite")
    P1, P2 = rig.left.matrix, rig.right.matrix
    X = np.array([triangulate_point(P1, P2, a, b) for a, b in zip(L, R)]).reshape(-1, 3)
    el = np.sum((project(rig.left, X)[0] - L) ** 2, axis=1)
    er = np.sum((project(rig.right, X)[0] - R) ** 2, axis=1)
    return Triangulation(X, np.sqrt((el + er) / 2.0))


@dataclass
class ErrorStats:
    mean: float
    std: float
    per_point: np.ndarray

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_point": self.per_point.tolist(), "n": len(self.per_point)}


def error_stats(distances) -> ErrorStats:
    d = np.asarray(distances, dtype=float).ravel()
    if len(d) == 0:
        raise ValueError("need at least one distance")
    std = float(np.std(d, ddof=1)) if len(d) > 1 else 0.0
    return ErrorStats(float(np.mean(d)), std, d)


def projection_error_stats(predicted, labeled) -> ErrorStats:
    """Euclidean distance per pair (pixels or mm), mean and N-1 std."""
    a = np.atleast_2d(np.asarray(predicted, float))
    b = np.atleast_2d(np.asarray(labeled, float))
    if a.shape != b.shape or len(a) == 0:
        raise ValueError(f"predicted/labeled length mismatch: {a.shape} vs {b.shape}")
    return error_stats(np.linalg.norm(a - b, axis=1))


def match_points(predicted, labeled) -> np.ndarray:
    """Index into ``predicted`` for each labeled row, minimising total distance.

    Mirrors pairing projected and labeled grid points by eye; rows may be
    stacked left/right pixel coordinates.
    """
    a = np.atleast_2d(np.asarray(predicted, float))
    b = np.atleast_2d(np.asarray(labeled, float))
    cost = np.linalg.norm(b[:, None, :] - a[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.full(len(b), -1)
    out[rows] = cols
    return out
