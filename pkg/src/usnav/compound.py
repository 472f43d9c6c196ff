"""Freehand 3D ultrasound compounding and stick hole-filling.

Compounding is forward (scatter): every pixel of every tracked frame is
pushed through ``pose @ probe_T_us`` into the voxel grid and spread over
its 8 neighbours with trilinear weights. A voxel keeps the maximum
weighted contribution it receives, so the result does not depend on the
order of the frames.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, SimilarityTransform, Transform
from .volume import Volume

log = logging.getLogger(__name__)

FILL_WEIGHT_THRESHOLD = 0.05
AUTO_PAD_VOXELS = 2
# Continuous voxel indices this close to an integer are snapped onto it.
SNAP_TOL = 1e-9

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])

STICK_DIRECTIONS = np.array(
    [
        (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
        (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
    ]
)


@dataclass(frozen=True, eq=False)
class TrackedFrame:
    """One 2D US image with the tracker pose of the probe marker (``OT <- Probe``).

    ``pixels`` is (H, W) with intensities in [0, 1]; pixel (row v, col u)
    is the US-image point (u, v, 0) in pixel units.
    """

    timestamp: float
    pose: RigidTransform
    pixels: np.ndarray
    pixel_spacing: tuple = (1.0, 1.0)
    valid: bool = True

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise ValueError("frame pixels must be a 2-D image")
        if not np.all(np.isfinite(px)):
            raise ValueError("frame pixels must be finite")
        if min(self.pixel_spacing) <= 0:
            raise ValueError("pixel spacing must be positive")
        object.__setattr__(self, "pixels", px)


@dataclass
class TrackedSequence:
    frames: list
    pixel_spacing: tuple = (1.0, 1.0)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def size(self) -> tuple:
        """(W, H) of the frames."""
        h, w = self.frames[0].pixels.shape
        return w, h


@dataclass(frozen=True)
class VolumeGrid:
    dims: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @classmethod
    def from_bounds(cls, lo, hi, spacing, orientation=None) -> "VolumeGrid":
        """Grid covering ``[lo, hi]``, given in the grid's own (rotated) axes."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        sp = np.broadcast_to(np.asarray(spacing, float), (3,))
        if np.any(hi - lo <= 0):
            raise ValueError(f"degenerate bounds: extent {hi - lo}")
        O = np.eye(3) if orientation is None else np.asarray(orientation, float)
        dims = tuple(int(n) for n in np.floor((hi - lo) / sp + 1e-9).astype(int) + 1)
        return cls(dims, tuple(sp), tuple(O @ lo), O)


class EmptyInputError(ValueError):
    pass


@dataclass
class CompoundReport:
    frames_used: int
    frames_skipped: int
    voxels_filled: int


def _pixel_points(h: int, w: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w]
    return np.column_stack([u.ravel(), v.ravel(), np.zeros(h * w)]).astype(float)


def _mapped_pixels(frames, probe_T_us, chunk: int = 2_000_000):
    """Yield (world points, intensities) for batches of whole frames."""
    cache: dict = {}
    batch_w, batch_i, count = [], [], 0
    for f in frames:
        h, w = f.pixels.shape
        if (h, w) not in cache:
            cache[h, w] = _pixel_points(h, w)
        batch_w.append((f.pose @ probe_T_us).apply(cache[h, w]))
        batch_i.append(f.pixels.ravel())
        count += h * w
        if count >= chunk:
            yield np.concatenate(batch_w), np.concatenate(batch_i)
            batch_w, batch_i, count = [], [], 0
    if batch_w:
        yield np.concatenate(batch_w), np.concatenate(batch_i)


def auto_grid(frames, probe_T_us: Transform, spacing, orientation=None) -> VolumeGrid:
    """Box around every frame's mapped corner pixels, padded by 2 voxels."""
    O = np.eye(3) if orientation is None else np.asarray(orientation, float)
    sp = np.broadcast_to(np.asarray(spacing, float), (3,))
    pts = []
    for f in frames:
        h, w = f.pixels.shape
        corners = np.array([[0, 0, 0], [w - 1, 0, 0], [0, h - 1, 0], [w - 1, h - 1, 0]], float)
        pts.append((f.pose @ probe_T_us).apply(corners))
    local = np.concatenate(pts) @ O
    lo = local.min(axis=0) - AUTO_PAD_VOXELS * sp
    hi = local.max(axis=0) + AUTO_PAD_VOXELS * sp
    return VolumeGrid.from_bounds(lo, hi, sp, O)


def _scatter(values, filled, dims, base, frac, inten, fill_threshold, checked):
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    wts = [(1.0 - frac[:, a], frac[:, a]) for a in range(3)]
    lin0 = base @ strides
    for c in _CORNERS:
        wgt = wts[0][c[0]] * wts[1][c[1]] * wts[2][c[2]]
        lin = lin0 + int(c @ strides)
        it = inten
        if checked:
            ok = np.all((base + c >= 0) & (base + c < dims), axis=1)
            wgt, lin, it = wgt[ok], lin[ok], it[ok]
        nz = it > 0
        np.maximum.at(values, lin[nz], wgt[nz] * it[nz])
        filled[lin[wgt >= fill_threshold]] = True


def compound(
    frames,
    probe_T_us: SimilarityTransform | Transform,
    spacing=None,
    bounds=None,
    orientation=None,
    grid: VolumeGrid | None = None,
    fill_threshold: float = FILL_WEIGHT_THRESHOLD,
) -> tuple[Volume, CompoundReport]:
    """Scatter tracked frames into a voxel grid with maximum compounding.

    The grid is ``grid`` if given, else ``bounds=(lo, hi)`` (mm, in the
    grid's axes) at ``spacing``, else the padded bounding box of all valid
    frames.
    """
    frames = list(frames)
    valid = [f for f in frames if f.valid]
    skipped = len(frames) - len(valid)
    if not valid:
        raise EmptyInputError("no valid tracked frames to compound")
    if skipped:
        log.info("compound: skipped %d frames with missing tracking", skipped)
    if grid is None:
        if spacing is None:
            raise ValueError("spacing is required unless an explicit grid is given")
        if bounds is None:
            grid = auto_grid(valid, probe_T_us, spacing, orientation)
        else:
            grid = VolumeGrid.from_bounds(bounds[0], bounds[1], spacing, orientation)

    dims = np.array(grid.dims)
    sp = np.asarray(grid.spacing, float)
    O = np.asarray(grid.orientation, float)
    origin = np.asarray(grid.origin, float)
    n = int(np.prod(dims))
    values = np.zeros(n)
    filled = np.zeros(n, bool)

    for world, inten in _mapped_pixels(valid, probe_T_us):
        q = ((world - origin) @ O) / sp
        qr = np.round(q)
        q = np.where(np.abs(q - qr) < SNAP_TOL, qr, q)
        base = np.floor(q).astype(np.int64)
        frac = q - base
        # Points whose whole 2x2x2 neighbourhood is inside skip per-corner bounds checks.
        full = np.all((base >= 0) & (base + 1 < dims), axis=1)
        for sel, checked in ((full, False), (~full, True)):
            if sel.any():
                _scatter(values, filled, dims, base[sel], frac[sel], inten[sel], fill_threshold, checked)

    # Voxels are single precision on disk; rounding here keeps a compounded
    # volume identical to its written and re-read copy.
    values = values.astype(np.float32).astype(float)
    vol = Volume(values.reshape(dims), grid.spacing, grid.origin, filled.reshape(dims), O)
    return vol, CompoundReport(len(valid), skipped, int(filled.sum()))


def _shift_view(padded: np.ndarray, offset, pad: int, shape) -> np.ndarray:
    sl = tuple(slice(pad + o, pad + o + n) for o, n in zip(offset, shape))
    return padded[sl]


def stick_hole_fill(vol: Volume, stick_length: int = 9, mask: np.ndarray | None = None) -> Volume:
    """Fill unfilled voxels by interpolating along 13 line directions.

    For every hole and every undirected line through it, the nearest
    filled voxel within ``stick_length`` steps is searched on both sides.
    A line with both ends found gives the distance-weighted linear
    interpolant of the two end values and contributes it with weight
    ``1 / (d_plus + d_minus)``. Only the original mask (``mask`` or
    ``vol.filled``) is read, so newly filled voxels never seed others.
    """
    if stick_length < 1:
        raise ValueError("stick_length must be >= 1")
    src = vol.filled if mask is None else np.asarray(mask, bool)
    holes = ~src
    if not holes.any() or not src.any():
        return vol
    L = int(stick_length)
    shape = src.shape
    vals = np.asarray(vol.voxels, float)
    pmask = np.pad(src, L, constant_values=False)
    pvals = np.pad(np.where(src, vals, 0.0), L)

    num = np.zeros(shape)
    den = np.zeros(shape)
    for d in STICK_DIRECTIONS:
        ends = []
        for sign in (1, -1):
            dist = np.zeros(shape)
            endv = np.zeros(shape)
            found = np.zeros(shape, bool)
            for k in range(1, L + 1):
                off = sign * k * d
                hit = _shift_view(pmask, off, L, shape) & ~found & holes
                dist[hit] = k
                endv[hit] = _shift_view(pvals, off, L, shape)[hit]
                found |= hit
            ends.append((found, dist, endv))
        (fp, dp, vp), (fm, dm, vm) = ends
        ok = fp & fm
        span = dp[ok] + dm[ok]
        cand = (vp[ok] * dm[ok] + vm[ok] * dp[ok]) / span
        num[ok] += cand / span
        den[ok] += 1.0 / span

    new = den > 0
    out = np.where(src, vals, 0.0)
    out[new] = num[new] / den[new]
    out = np.where(src | new, out, vals)
    return vol.with_voxels(out, src | new)
