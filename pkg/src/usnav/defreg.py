"""Deformable US/US registration: centroid translation init, multi-resolution
demons minimising the mean squared intensity difference, and field statistics.

The fixed image is sampled on its own grid; the moving image is pulled
back through ``phi(x) = init^-1(x + u(x))`` where ``init`` maps moving
coordinates to fixed coordinates and ``u`` is the displacement field in mm.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Frame, RigidTransform, Transform
from .volume import Volume, pyramid

CONVERGENCE_WINDOW = 5
CONVERGENCE_TOL = 1e-4
MAX_STEP_HALVINGS = 4


class ZeroMassError(ValueError):
    pass


class NoOverlapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement (mm) on the grid of a fixed volume."""

    vectors: np.ndarray
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 4 or v.shape[-1] != 3:
            raise ValueError(f"displacement field must have shape (nx, ny, nz, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement field contains non-finite vectors")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, float))

    @classmethod
    def zeros_like(cls, vol: Volume) -> "DisplacementField":
        return cls(np.zeros(vol.dims + (3,)), vol.spacing, vol.origin, vol.orientation)

    @property
    def dims(self) -> tuple:
        return self.vectors.shape[:3]

    def grid(self) -> Volume:
        return Volume(np.zeros(self.dims), self.spacing, self.origin, None, self.orientation)

    def matches(self, vol: Volume) -> bool:
        return (
            self.dims == vol.dims
            and tuple(self.spacing) == tuple(vol.spacing)
            and tuple(self.origin) == tuple(vol.origin)
        )

    def at(self, points) -> np.ndarray:
        """Trilinear displacement at world points (edge values held outside)."""
        g = self.grid()
        idx = g.world_to_index(np.asarray(points, float)).reshape(-1, 3).T
        out = np.stack(
            [ndimage.map_coordinates(self.vectors[..., c], idx, order=1, mode="nearest") for c in range(3)],
            axis=-1,
        )
        return out.reshape(np.shape(points))


@dataclass
class FieldStats:
    max_deformation: float
    mean: float
    jacobian_min: float

    def as_dict(self) -> dict:
        return {"max_deformation": self.max_deformation, "mean": self.mean, "jacobian_min": self.jacobian_min}


def jacobian_determinant(fld: DisplacementField) -> np.ndarray:
    """det(I + du/dx) per voxel, central differences (one-sided at edges)."""
    v = fld.vectors
    # D[..., c, a]: derivative of component c along grid axis a (mm).
    D = np.empty(v.shape[:3] + (3, 3))
    for c in range(3):
        for a in range(3):
            if v.shape[a] > 1:
                D[..., c, a] = np.gradient(v[..., c], fld.spacing[a], axis=a)
            else:
                D[..., c, a] = 0.0
    J = np.eye(3) + D @ fld.orientation.T
    return np.linalg.det(J)


def field_stats(fld: DisplacementField) -> FieldStats:
    norms = np.linalg.norm(fld.vectors, axis=-1)
    return FieldStats(float(norms.max()), float(norms.mean()), float(jacobian_determinant(fld).min()))


def intensity_centroid(vol: Volume) -> np.ndarray:
    w = np.where(vol.filled, np.asarray(vol.voxels, float), 0.0)
    mass = w.sum()
    if not np.isfinite(mass) or mass <= 0:
        raise ZeroMassError("volume has no positive intensity mass")
    idx = [np.arange(n) for n in vol.dims]
    c = np.array(
        [
            np.sum(w.sum(axis=tuple(b for b in range(3) if b != a)) * idx[a]) / mass
            for a in range(3)
        ]
    )
    return vol.index_to_world(c)


def init_translation(fixed: Volume, moving: Volume) -> RigidTransform:
    """Translation ``centroid(fixed) - centroid(moving)``, mapping moving to fixed."""
    t = intensity_centroid(fixed) - intensity_centroid(moving)
    return RigidTransform.from_rt(None, t, Frame.VOLUME, Frame.VOLUME)


@dataclass(frozen=True)
class DemonsConfig:
    levels: int = 3
    iters_per_level: tuple = (100, 100, 50)
    sigma_fluid: float = 1.0
    sigma_diffusion: float = 1.5
    kappa: float | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.sigma_fluid < 0 or self.sigma_diffusion < 0:
            raise ValueError("smoothing sigmas must be >= 0")
        if self.kappa is not None and self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if len(self.iters_per_level) != self.levels:
            raise ValueError("one iteration budget per level")


@dataclass
class DemonsResult:
    field: DisplacementField
    init: Transform
    mse_trace: list
    converged: bool
    initial_mse: float
    final_mse: float
    wall_time: float = 0.0

    def mapping(self, points) -> np.ndarray:
        """Fixed-space points to their matched moving-space points."""
        p = np.asarray(points, float)
        return self.init.inverse().apply(p + self.field.at(p))

    def report(self) -> dict:
        return {
            "initial_mse": self.initial_mse,
            "final_mse": self.final_mse,
            "mse_trace": self.mse_trace,
            "converged": self.converged,
            "init_translation": self.init.translation.tolist(),
            "field": field_stats(self.field).as_dict(),
            "wall_time": self.wall_time,
        }


def _smooth(u: np.ndarray, sigma_mm: float, spacing) -> np.ndarray:
    if sigma_mm <= 0:
        return u
    sig = [sigma_mm / s for s in spacing] + [0.0]
    return ndimage.gaussian_filter(u, sig, mode="nearest")


class _Level:
    def __init__(self, fixed: Volume, moving: Volume, inv_init: Transform):
        self.fixed = fixed
        self.moving = moving
        self.F = np.asarray(fixed.voxels, float)
        self.points = fixed.grid_points()
        self.inv_init = inv_init

    def warp(self, u):
        phi = self.inv_init.apply(self.points + u)
        Mw, inside = self.moving.sample(phi)
        mask = inside & self.fixed.filled
        if not mask.any():
            raise NoOverlapError("fixed and warped moving volumes do not overlap")
        d = self.F - Mw
        return Mw, mask, float(np.mean(d[mask] ** 2))


def _upsample_field(u: np.ndarray, coarse: Volume, fine: Volume) -> np.ndarray:
    idx = coarse.world_to_index(fine.grid_points()).reshape(-1, 3).T
    out = np.stack([ndimage.map_coordinates(u[..., c], idx, order=1, mode="nearest") for c in range(3)], -1)
    return out.reshape(fine.dims + (3,))


def register_demons(
    fixed: Volume,
    moving: Volume,
    init: Transform | None = None,
    cfg: DemonsConfig = DemonsConfig(),
    callback=None,
) -> DemonsResult:
    """Multi-resolution demons; the MSE trace of each level never increases.

    Each iteration computes ``(F - Mw) grad(Mw) / (|grad Mw|^2 + (F - Mw)^2 / kappa^2)``,
    smooths it (fluid), adds it to the field and smooths the field
    (diffusion). A step that would raise the MSE is halved (towards the
    current field) and retried;
    a level stops once the relative MSE gain over the last 5 accepted
    steps drops below 1e-4. ``callback(level, field)`` is called after
    every level with that level's :class:`DisplacementField`.
    """
    t0 = time.perf_counter()
    if init is None:
        init = RigidTransform.identity()
    inv_init = init.inverse()
    fpyr = pyramid(fixed, cfg.levels)
    mpyr = pyramid(moving, cfg.levels)

    finest = _Level(fixed, moving, inv_init)
    _, _, mse0 = finest.warp(np.zeros(fixed.dims + (3,)))

    u = np.zeros(fpyr[0].dims + (3,))
    trace: list[list[float]] = []
    converged = True
    prev = None
    for lvl, (fl, ml) in enumerate(zip(fpyr, mpyr)):
        if prev is not None:
            u = _upsample_field(u, prev, fl)
        level = _Level(fl, ml, inv_init)
        kappa = cfg.kappa if cfg.kappa is not None else float(np.mean(fl.spacing))
        # Sigmas are mm on the finest grid and keep their size in voxels on
        # coarser ones, so every level is regularised alike.
        zoom = float(np.mean(fl.spacing) / np.mean(fixed.spacing))
        sig_f, sig_d = cfg.sigma_fluid * zoom, cfg.sigma_diffusion * zoom
        Mw, mask, mse = level.warp(u)
        lt = [mse]
        level_done = False
        for _ in range(cfg.iters_per_level[lvl]):
            diff = np.where(mask, level.F - Mw, 0.0)
            grad = np.stack(np.gradient(Mw, *fl.spacing), axis=-1)
            denom = np.sum(grad * grad, axis=-1) + diff * diff / kappa**2
            with np.errstate(divide="ignore", invalid="ignore"):
                k = np.where(denom > 0, diff / denom, 0.0)
            upd = _smooth(k[..., None] * grad, sig_f, fl.spacing)
            # Full demons step; halving moves the candidate back towards u.
            full = _smooth(u + upd, sig_d, fl.spacing) - u
            step = 1.0
            accepted = False
            for _h in range(MAX_STEP_HALVINGS + 1):
                cand = u + step * full
                Mw_c, mask_c, mse_c = level.warp(cand)
                if mse_c <= mse:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                level_done = True
                break
            u, Mw, mask, mse = cand, Mw_c, mask_c, mse_c
            lt.append(mse)
            if len(lt) > CONVERGENCE_WINDOW:
                old = lt[-1 - CONVERGENCE_WINDOW]
                if old <= 0 or (old - mse) / old < CONVERGENCE_TOL:
                    level_done = True
                    break
        converged &= level_done
        trace.append(lt)
        prev = fl
        if callback is not None:
            callback(lvl, DisplacementField(u, fl.spacing, fl.origin, fl.orientation))

    _, _, mse_final = finest.warp(u)
    if mse_final > mse0:
        u, mse_final = np.zeros_like(u), mse0
    fld = DisplacementField(u, fixed.spacing, fixed.origin, fixed.orientation)
    return DemonsResult(fld, init, trace, converged, mse0, mse_final, time.perf_counter() - t0)
