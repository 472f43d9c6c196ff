"""Least-squares point-based calibrations.

* :func:`fit_rigid` -- orthogonal Procrustes (robot/tracker calibration).
* :func:`fit_similarity` -- Umeyama, or alternating per-axis scale
  (stylus-based US/probe calibration).
* :func:`pivot_calibrate` -- stylus tip offset from pivoting poses.
* :func:`temporal_align` -- time offset between two motion signals.

Fit/test splitting is left to callers; the solvers see only the points
they are given.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    Frame,
    RigidTransform,
    SimilarityTransform,
    polar_orthonormalize,
)

DEGENERATE_RATIO = 1e-9
SIMILARITY_MAX_ITER = 100
SIMILARITY_TOL = 1e-10
PIVOT_MAX_COND = 1e6
PIVOT_MIN_RANGE_DEG = 30.0


class DegenerateConfigurationError(ValueError):
    """Point configuration cannot determine the requested transform."""


class IllConditionedError(ValueError):
    pass


@dataclass(frozen=True)
class CorrespondencePairs:
    """``fixed[i]`` corresponds to ``moving[i]``; transforms map moving -> fixed."""

    fixed: np.ndarray
    moving: np.ndarray
    source: Frame = Frame.VOLUME
    target: Frame = Frame.VOLUME

    def __post_init__(self):
        f = np.array(self.fixed, dtype=float).reshape(-1, 3)
        m = np.array(self.moving, dtype=float).reshape(-1, 3)
        if f.shape != m.shape:
            raise ValueError(f"fixed/moving length mismatch: {len(f)} vs {len(m)}")
        if len(f) < 3:
            raise ValueError("need at least 3 correspondences")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
            raise ValueError("correspondences contain non-finite coordinates")
        object.__setattr__(self, "fixed", f)
        object.__setattr__(self, "moving", m)

    def __len__(self):
        return len(self.fixed)

    def subset(self, idx) -> "CorrespondencePairs":
        return CorrespondencePairs(self.fixed[idx], self.moving[idx], self.source, self.target)


@dataclass
class FitReport:
    rms_residual: float
    residuals: np.ndarray
    reflection_corrected: bool = False
    iterations: int = 0
    converged: bool = True


def residuals(T, pairs: CorrespondencePairs) -> np.ndarray:
    """Per-pair distance ``|fixed - T(moving)|``."""
    return np.linalg.norm(pairs.fixed - T.apply(pairs.moving), axis=1)


def _report(T, pairs, **kw) -> FitReport:
    r = residuals(T, pairs)
    return FitReport(float(np.sqrt(np.mean(r**2))), r, **kw)


def _spread(x: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    return s / s[0] if s[0] > 0 else np.zeros(3)


def _procrustes(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Rotation minimizing sum |Y_i - R X_i|^2 for centred X, Y."""
    U, _, Vt = np.linalg.svd(X.T @ Y)
    D = np.eye(3)
    flipped = np.linalg.det(Vt.T @ U.T) < 0
    if flipped:
        D[2, 2] = -1.0
    return Vt.T @ D @ U.T, bool(flipped)


def fit_rigid(pairs: CorrespondencePairs) -> tuple[RigidTransform, FitReport]:
    """Global least-squares rigid map taking ``moving`` onto ``fixed``."""
    if _spread(pairs.moving)[1] < DEGENERATE_RATIO or _spread(pairs.fixed)[1] < DEGENERATE_RATIO:
        raise DegenerateConfigurationError("points are collinear; rotation is undetermined")
    mx, my = pairs.moving.mean(axis=0), pairs.fixed.mean(axis=0)
    R, flipped = _procrustes(pairs.moving - mx, pairs.fixed - my)
    T = RigidTransform.from_rt(R, my - R @ mx, pairs.source, pairs.target)
    return T, _report(T, pairs, reflection_corrected=flipped)


def fit_similarity(pairs: CorrespondencePairs, isotropic: bool = True) -> tuple[SimilarityTransform, FitReport]:
    """Least-squares similarity ``fixed ~ R diag(s) moving + t``.

    With ``isotropic=True`` this is the closed-form Umeyama solution and
    works for coplanar moving points (e.g. US image pixels at z=0). The
    per-axis variant alternates closed-form scales with Procrustes and
    needs non-coplanar points.
    """
    X = pairs.moving - pairs.moving.mean(axis=0)
    Y = pairs.fixed - pairs.fixed.mean(axis=0)
    spread = _spread(pairs.moving)
    if spread[1] < DEGENERATE_RATIO:
        raise DegenerateConfigurationError("points are collinear; similarity is undetermined")

    if isotropic:
        if len(pairs) < 3:
            raise DegenerateConfigurationError("isotropic similarity needs >= 3 points")
        R, flipped = _procrustes(X, Y)
        s = float(np.sum((X @ R.T) * Y) / np.sum(X**2))
        if s <= 0:
            raise DegenerateConfigurationError("least-squares scale is not positive")
        scale = np.full(3, s)
        iterations, converged = 0, True
    else:
        if len(pairs) < 4:
            raise DegenerateConfigurationError("per-axis similarity needs >= 4 points")
        if spread[2] < DEGENERATE_RATIO:
            raise DegenerateConfigurationError("coplanar points cannot fix a per-axis scale")
        # Affine least squares seeds both blocks; exact for noiseless data.
        A = np.linalg.lstsq(X, Y, rcond=None)[0].T
        scale = np.linalg.norm(A, axis=0)
        R = polar_orthonormalize(A / scale)
        flipped = False
        converged = False
        for iterations in range(1, SIMILARITY_MAX_ITER + 1):
            Z = Y @ R  # rows are R^T y_i
            new_scale = np.sum(Z * X, axis=0) / np.sum(X**2, axis=0)
            if np.any(new_scale <= 0):
                raise DegenerateConfigurationError("per-axis scale converged to a non-positive value")
            new_R, flipped = _procrustes(X * new_scale, Y)
            change = max(np.max(np.abs(new_scale - scale)), np.max(np.abs(new_R - R)))
            scale, R = new_scale, new_R
            if change < SIMILARITY_TOL:
                converged = True
                break

    t = pairs.fixed.mean(axis=0) - R @ (scale * pairs.moving.mean(axis=0))
    T = SimilarityTransform.from_rst(R, scale, t, pairs.source, pairs.target)
    return T, _report(T, pairs, reflection_corrected=flipped, iterations=iterations, converged=converged)


def stylus_correspondences(
    ot_T_stylus: Sequence[RigidTransform],
    tip_offset,
    ot_T_probe: Sequence[RigidTransform],
    us_tip_px,
) -> CorrespondencePairs:
    """Pairs for the probe calibration: tip in probe frame (mm) vs tip in US pixels.

    ``us_tip_px`` holds (u, v) pixel locations of the stylus tip, already
    paired in time with the tracker poses.
    """
    tip = np.asarray(tip_offset, dtype=float)
    fixed = [P.inverse().apply(S.apply(tip)) for S, P in zip(ot_T_stylus, ot_T_probe)]
    px = np.asarray(us_tip_px, dtype=float).reshape(-1, 2)
    moving = np.column_stack([px, np.zeros(len(px))])
    return CorrespondencePairs(np.array(fixed), moving, Frame.US_IMAGE, Frame.PROBE)


@dataclass(frozen=True)
class PivotPoses:
    """Stylus poses ``OT <- Stylus`` recorded while pivoting about one point."""

    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 6:
            raise ValueError("pivot calibration needs at least 6 poses")
        object.__setattr__(self, "poses", poses)
        if self.angular_range_deg() < PIVOT_MIN_RANGE_DEG:
            raise IllConditionedError(
                f"pivot poses span only {self.angular_range_deg():.1f} deg (< {PIVOT_MIN_RANGE_DEG})"
            )

    def angular_range_deg(self) -> float:
        Rs = np.array([p.rotation for p in self.poses])
        best = 0.0
        for i in range(len(Rs)):
            rel = np.einsum("ji,njk->nik", Rs[i], Rs[i + 1:])
            if len(rel):
                c = (np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0
                best = max(best, float(np.degrees(np.arccos(np.clip(c, -1, 1))).max()))
        return best


@dataclass
class PivotResult:
    tip_offset: np.ndarray
    pivot_point: np.ndarray
    rms: float
    residuals: np.ndarray = field(repr=False)


def pivot_calibrate(poses: PivotPoses | Sequence[RigidTransform]) -> PivotResult:
    """Solve ``R_i tip + t_i = p`` for the tip offset and pivot point."""
    if not isinstance(poses, PivotPoses):
        poses = PivotPoses(tuple(poses))
    n = len(poses.poses)
    A = np.zeros((3 * n, 6))
    b = np.zeros(3 * n)
    for i, T in enumerate(poses.poses):
        A[3 * i:3 * i + 3, :3] = T.rotation
        A[3 * i:3 * i + 3, 3:] = -np.eye(3)
        b[3 * i:3 * i + 3] = -T.translation
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > PIVOT_MAX_COND:
        raise IllConditionedError(f"pivot system condition number {cond:.3g} exceeds {PIVOT_MAX_COND:g}")
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    tip, pivot = x[:3], x[3:]
    res = np.linalg.norm((A @ x - b).reshape(n, 3), axis=1)
    return PivotResult(tip, pivot, float(np.sqrt(np.mean(res**2))), res)


@dataclass(frozen=True)
class TimeSeries:
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise ValueError("timestamps and values must be 1-D of equal length")
        if len(t) < 2:
            raise ValueError("time series needs at least 2 samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", v)


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class TemporalAlignment:
    lag: float
    peak_ncc: float
    grid_step: float


def _ncc(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    d = np.sqrt(np.sum(x * x) * np.sum(y * y))
    return float(np.sum(x * y) / d) if d > 0 else np.nan


def temporal_align(a: TimeSeries, b: TimeSeries, max_lag: float) -> TemporalAlignment:
    """Lag ``L`` (s) such that ``b(t + L)`` best matches ``a(t)``.

    A positive lag means ``b`` is delayed relative to ``a``. Both signals
    are linearly resampled on a uniform grid whose step is the smaller of
    the two median sample intervals; the discrete NCC peak is refined by a
    parabola through its neighbours.
    """
    if np.ptp(a.values) == 0 or np.ptp(b.values) == 0:
        raise UndefinedCorrelationError("constant signal has zero variance")
    step = min(np.median(np.diff(a.timestamps)), np.median(np.diff(b.timestamps)))
    grid = np.arange(a.timestamps[0], a.timestamps[-1] + 0.5 * step, step)
    grid = grid[grid <= a.timestamps[-1]]
    av = np.interp(grid, a.timestamps, a.values)
    k_max = int(np.floor(max_lag / step + 1e-9))
    lags = np.arange(-k_max, k_max + 1)
    scores = np.full(len(lags), np.nan)
    for i, k in enumerate(lags):
        tb = grid + k * step
        ok = (tb >= b.timestamps[0]) & (tb <= b.timestamps[-1])
        if ok.sum() < 3:
            continue
        scores[i] = _ncc(av[ok], np.interp(tb[ok], b.timestamps, b.values))
    if np.all(np.isnan(scores)):
        raise ValueError("signals do not overlap for any lag within max_lag")
    j = int(np.nanargmax(scores))
    c0 = scores[j]
    delta = 0.0
    if 0 < j < len(lags) - 1 and np.isfinite(scores[j - 1]) and np.isfinite(scores[j + 1]):
        cm, cp = scores[j - 1], scores[j + 1]
        denom = cm - 2 * c0 + cp
        if denom < 0:
            delta = 0.5 * (cm - cp) / denom
            c0 = c0 - 0.25 * (cm - cp) * delta
    return TemporalAlignment(float((lags[j] + delta) * step), float(np.clip(c0, -1, 1)), float(step))
