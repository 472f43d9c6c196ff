"""LC2 similarity and affine US/MRI registration.

LC2 explains the US intensity in every local patch as a linear
combination of MRI intensity, MRI gradient magnitude and a constant. The
fraction of US variance explained, weighted by the US variance of each
patch, is the metric. US is the fixed image; the transform maps US world
coordinates (mm) to MRI world coordinates, where the MRI is sampled.

All per-patch statistics come from box filters over the masked sample
products, so a metric evaluation costs a handful of separable filters.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.spatial.transform import Rotation

from .geometry import AffineTransform, Frame, Transform
from .volume import Volume, gradient_magnitude, pyramid

log = logging.getLogger(__name__)

MIN_INBOUNDS_FRACTION = 0.5
SCALE_BOUNDS = (0.5, 2.0)


class NoOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class LC2Config:
    patch_radius: int = 7
    min_variance: float = 1e-8
    ridge: float = 1e-8
    stride: int = 1

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.min_variance <= 0:
            raise ValueError("min_variance must be > 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class AffineParams:
    """Local affine ``T R Shear diag(exp(log_scale))`` acting about a centre point."""

    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    log_scale: tuple = (0.0, 0.0, 0.0)
    shear: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, x) -> "AffineParams":
        x = np.asarray(x, float)
        return cls(tuple(x[0:3]), tuple(x[3:6]), tuple(x[6:9]), tuple(x[9:12]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation, self.log_scale, self.shear]).astype(float)

    def linear(self) -> np.ndarray:
        R = Rotation.from_rotvec(self.rotation).as_matrix()
        a, b, c = self.shear
        Sh = np.array([[1.0, a, b], [0.0, 1.0, c], [0.0, 0.0, 1.0]])
        return R @ Sh @ np.diag(np.exp(self.log_scale))

    def to_matrix(self, center=(0.0, 0.0, 0.0)) -> np.ndarray:
        c = np.asarray(center, float)
        A = self.linear()
        M = np.eye(4)
        M[:3, :3] = A
        M[:3, 3] = c + np.asarray(self.translation) - A @ c
        return M


class _LC2Evaluator:
    """Caches the fixed-image side of LC2 for repeated evaluations."""

    def __init__(self, us: Volume, mri: Volume, cfg: LC2Config):
        self.cfg = cfg
        self.mri = mri
        self.mri_data = np.asarray(mri.voxels, float)
        self.mri_grad = gradient_magnitude(mri)
        self.us = np.asarray(us.voxels, float)
        self.us_mask = us.filled
        self.shape = us.dims
        self.size = 2 * cfg.patch_radius + 1
        idx = np.indices(self.shape).reshape(3, -1).astype(float)
        self.us_index = np.vstack([idx, np.ones(idx.shape[1])])
        # US index -> US world, and MRI world -> MRI index, as 4x4 matrices.
        self.us_i2w = np.eye(4)
        self.us_i2w[:3, :3] = us.orientation * np.asarray(us.spacing)
        self.us_i2w[:3, 3] = us.origin
        self.mri_w2i = np.eye(4)
        self.mri_w2i[:3, :3] = mri.orientation.T / np.asarray(mri.spacing)[:, None]
        self.mri_w2i[:3, 3] = -self.mri_w2i[:3, :3] @ np.asarray(mri.origin)
        self.hi = np.array(mri.dims, float) - 1
        self._full = None

    def _box(self, a: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(a, self.size, mode="constant", cval=0.0)

    def _fixed_stats(self, w, s, full: bool):
        """Patch counts and US mean/variance; cached for the unclipped mask."""
        if full and self._full is not None:
            return self._full
        u = self.us * w
        n = self._box(w)[s]
        ok = n >= MIN_INBOUNDS_FRACTION
        nn = np.where(ok, n, 1.0)
        mu = self._box(u)[s] / nn
        vu = self._box(u * u)[s] / nn - mu * mu
        out = (u, ok, nn, mu, vu)
        if full:
            self._full = out
        return out

    def __call__(self, T: Transform) -> float:
        cfg = self.cfg
        idx = (self.mri_w2i @ T.matrix @ self.us_i2w @ self.us_index)[:3]
        inside = np.all((idx >= -1e-9) & (idx <= self.hi[:, None] + 1e-9), axis=0).reshape(self.shape)
        full = bool(inside[self.us_mask].all())
        w = (inside & self.us_mask).astype(float)
        if not w.any():
            raise NoOverlapError("transformed US grid does not overlap the MRI")
        m = ndimage.map_coordinates(self.mri_data, idx, order=1, mode="nearest").reshape(self.shape) * w
        g = ndimage.map_coordinates(self.mri_grad, idx, order=1, mode="nearest").reshape(self.shape) * w

        s = (slice(None, None, cfg.stride),) * 3
        u, ok, nn, mu, vu = self._fixed_stats(w, s, full)
        if not ok.any():
            raise NoOverlapError("no patch has enough in-bounds samples")

        def mean(a):
            return self._box(a)[s] / nn

        mm, mg = mean(m), mean(g)
        vm = mean(m * m) - mm * mm
        vg = mean(g * g) - mg * mg
        cmg = mean(m * g) - mm * mg
        cum = mean(u * m) - mu * mm
        cug = mean(u * g) - mu * mg

        vm = np.maximum(vm, 0.0)
        vg = np.maximum(vg, 0.0)
        # Ridge proportional to each regressor's variance keeps the fit
        # invariant to rescaling MRI intensities.
        a11 = vm * (1.0 + cfg.ridge) + 1e-300
        a22 = vg * (1.0 + cfg.ridge) + 1e-300
        det = a11 * a22 - cmg * cmg
        det = np.where(det > 0, det, np.inf)
        ta = (a22 * cum - cmg * cug) / det
        tb = (a11 * cug - cmg * cum) / det
        vres = vu - 2.0 * (ta * cum + tb * cug) + ta * ta * vm + 2.0 * ta * tb * cmg + tb * tb * vg

        use = ok & (vu >= cfg.min_variance)
        if not use.any():
            raise NoOverlapError("every overlapping patch is flat in the US image")
        vu_u = vu[use]
        sim = np.clip(1.0 - vres[use] / vu_u, 0.0, 1.0)
        return float(np.sum(vu_u * sim) / np.sum(vu_u))


def lc2_metric(us: Volume, mri: Volume, T: Transform | None = None, cfg: LC2Config = LC2Config()) -> float:
    """Variance-weighted LC2 similarity in [0, 1]; ``T`` maps US mm to MRI mm."""
    if T is None:
        T = AffineTransform(np.eye(4), Frame.VOLUME, Frame.MRI)
    return _LC2Evaluator(us, mri, cfg)(T)


@dataclass
class OptimizerOptions:
    levels: int = 3
    shrink: int = 2
    max_iter: int = 150
    tol: float = 1e-4
    xtol: float = 1e-2
    restarts: int = 1
    seed: int = 0
    coarse_stride: int = 2


@dataclass
class LC2Result:
    transform: AffineTransform
    metric: float
    initial_metric: float
    trace: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    converged: bool = True
    wall_time: float = 0.0

    def report(self) -> dict:
        return {
            "metric": self.metric,
            "initial_metric": self.initial_metric,
            "iterations_per_level": self.iterations,
            "trace": self.trace,
            "converged": self.converged,
            "wall_time": self.wall_time,
        }


# Parameter units for the simplex: translation in voxels of the current
# level, angles/log-scales/shears as fractions.
_ROT_STEP = np.radians(2.0)
_AFF_STEP = 0.02


def _param_scales(spacing) -> np.ndarray:
    t = float(np.mean(spacing))
    return np.array([t, t, t] + [_ROT_STEP] * 3 + [_AFF_STEP] * 6)


def register_affine_lc2(
    us: Volume,
    mri: Volume,
    init: Transform,
    cfg: LC2Config = LC2Config(),
    opt: OptimizerOptions = OptimizerOptions(),
) -> LC2Result:
    """Refine ``init`` (US -> MRI) by maximising LC2 over a 12-dof affine.

    Coarse-to-fine over a Gaussian pyramid; each level runs Nelder-Mead
    from the previous level's optimum, then one seeded restart. The
    refinement acts in US space about the US volume centre:
    ``T = init @ delta``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(opt.seed)
    init = AffineTransform(init.matrix, init.source, init.target)
    center = us.center

    fine_eval = _LC2Evaluator(us, mri, cfg)
    try:
        m_init = fine_eval(init)
    except NoOverlapError as exc:
        raise NoOverlapError(f"registration refused to start: {exc}") from exc

    us_pyr = pyramid(us, opt.levels, opt.shrink)
    mri_pyr = pyramid(mri, opt.levels, opt.shrink)
    x_best = np.zeros(12)
    lo = np.full(12, -np.inf)
    hi = np.full(12, np.inf)
    lo[6:9], hi[6:9] = np.log(SCALE_BOUNDS[0]), np.log(SCALE_BOUNDS[1])

    def to_transform(x):
        delta = AffineParams.from_vector(x).to_matrix(center)
        return AffineTransform(init.matrix @ delta, init.source, init.target)

    trace, iters = [], []
    converged = True
    for level, (us_l, mri_l) in enumerate(zip(us_pyr, mri_pyr)):
        finest = level == opt.levels - 1
        stride = cfg.stride if finest else max(cfg.stride, opt.coarse_stride)
        lcfg = LC2Config(cfg.patch_radius, cfg.min_variance, cfg.ridge, stride)
        ev = fine_eval if finest and stride == cfg.stride else _LC2Evaluator(us_l, mri_l, lcfg)
        scales = _param_scales(us_l.spacing)

        def cost(z):
            x = np.clip(z * scales, lo, hi)
            try:
                return -ev(to_transform(x))
            except NoOverlapError:
                return 1.0

        level_trace: list[float] = []
        best_z = x_best / scales
        best_f = cost(best_z)
        level_trace.append(-best_f)
        n_iter = 0
        for attempt in range(1 + opt.restarts):
            step = np.ones(12) if attempt == 0 else rng.choice([-1.0, 1.0], 12) * rng.uniform(0.5, 1.0, 12)
            simplex = np.vstack([best_z, best_z + np.diag(step)])

            def record(intermediate_result):
                level_trace.append(max(level_trace[-1], -float(intermediate_result.fun)))

            res = optimize.minimize(
                cost,
                best_z,
                method="Nelder-Mead",
                bounds=list(zip(lo / scales, hi / scales)),
                callback=record,
                options={
                    "initial_simplex": simplex,
                    "maxiter": opt.max_iter,
                    "fatol": opt.tol,
                    "xatol": opt.xtol,
                },
            )
            n_iter += int(res.nit)
            if attempt == 0:
                converged &= bool(res.success)
            if res.fun < best_f:
                best_f, best_z = float(res.fun), np.asarray(res.x, float)
            level_trace.append(max(level_trace[-1], -best_f))
        x_best = np.clip(best_z * scales, lo, hi)
        trace.append(level_trace)
        iters.append(n_iter)
        log.debug("lc2 level %d: metric %.5f after %d iterations", level, -best_f, n_iter)

    T = to_transform(x_best)
    m_final = fine_eval(T)
    if m_final < m_init:
        T, m_final = init, m_init
    return LC2Result(T, m_final, m_init, trace, iters, converged, time.perf_counter() - t0)
