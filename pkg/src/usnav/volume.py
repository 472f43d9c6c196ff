"""Scalar voxel grid with physical placement, plus trilinear sampling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage


@dataclass(frozen=True, eq=False)
class Volume:
    """Voxel ``[i, j, k]`` sits at ``origin + orientation @ (spacing * (i, j, k))`` (mm).

    ``filled`` marks voxels that carry data; by default every voxel does.
    """

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    filled: np.ndarray | None = None
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive dims, got shape {v.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        mask = np.ones(v.shape, bool) if self.filled is None else np.asarray(self.filled, bool)
        if mask.shape != v.shape:
            raise ValueError("filled mask and voxels differ in shape")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "filled", mask)
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))

    @property
    def dims(self) -> tuple:
        return self.voxels.shape

    def with_voxels(self, voxels, filled=None) -> "Volume":
        return replace(self, voxels=voxels, filled=filled)

    def index_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=float)
        return (ijk * self.spacing) @ self.orientation.T + self.origin

    def world_to_index(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        return ((xyz - self.origin) @ self.orientation) / self.spacing

    def grid_points(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape ``dims + (3,)``."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return self.index_to_world(idx)

    @property
    def center(self) -> np.ndarray:
        return self.index_to_world((np.array(self.dims) - 1) / 2.0)

    def sample(self, xyz, data=None, order: int = 1):
        """Interpolate ``data`` (default the voxels) at world points.

        Returns ``(values, inside)``; points outside the grid get value 0.
        """
        idx = self.world_to_index(xyz)
        shape = idx.shape[:-1]
        idx = idx.reshape(-1, 3)
        arr = self.voxels if data is None else data
        hi = np.array(self.dims) - 1
        inside = np.all((idx >= -1e-9) & (idx <= hi + 1e-9), axis=1)
        vals = ndimage.map_coordinates(np.asarray(arr, float), idx.T, order=order, mode="nearest")
        vals[~inside] = 0.0
        return vals.reshape(shape), inside.reshape(shape)


def gradient_magnitude(vol: Volume) -> np.ndarray:
    """Central-difference gradient norm in intensity per mm."""
    g = np.gradient(np.asarray(vol.voxels, float), *vol.spacing)
    return np.sqrt(sum(gi * gi for gi in g))


def downsample(vol: Volume, shrink: int = 2) -> Volume:
    """Gaussian blur (sigma = shrink/2 voxels) then take every ``shrink``-th voxel."""
    if shrink == 1:
        return vol
    blurred = ndimage.gaussian_filter(np.asarray(vol.voxels, float), shrink / 2.0, mode="nearest")
    sub = blurred[::shrink, ::shrink, ::shrink]
    return Volume(
        sub,
        tuple(s * shrink for s in vol.spacing),
        vol.origin,
        vol.filled[::shrink, ::shrink, ::shrink],
        vol.orientation,
    )


def pyramid(vol: Volume, levels: int, shrink: int = 2) -> list[Volume]:
    """Coarsest level first."""
    out = [vol]
    for _ in range(levels - 1):
        out.append(downsample(out[-1], shrink))
    return out[::-1]
