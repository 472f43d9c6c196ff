"""Straightforward reference implementations used as test oracles."""
import numpy as np

from usnav.compound import STICK_DIRECTIONS


def brute_force_fill(vals, mask, L=9):
    """Per-voxel walk along every stick; the reference for stick_hole_fill."""
    nx, ny, nz = mask.shape
    v = vals.tolist()
    m = mask.tolist()
    dirs = [tuple(int(c) for c in d) for d in STICK_DIRECTIONS]
    out = np.where(mask, vals, 0.0).astype(float)
    new = np.zeros(mask.shape, bool)
    for i, j, k in zip(*np.nonzero(~mask)):
        i, j, k = int(i), int(j), int(k)
        num = den = 0.0
        for dx, dy, dz in dirs:
            ends = []
            for s in (1, -1):
                for step in range(1, L + 1):
                    x, y, z = i + s * step * dx, j + s * step * dy, k + s * step * dz
                    if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
                        break
                    if m[x][y][z]:
                        ends.append((step, v[x][y][z]))
                        break
            if len(ends) == 2:
                (dp, vp), (dm, vm) = ends
                span = dp + dm
                num += (vp * dm + vm * dp) / span / span
                den += 1.0 / span
        if den > 0:
            out[i, j, k] = num / den
            new[i, j, k] = True
    return out, mask | new
