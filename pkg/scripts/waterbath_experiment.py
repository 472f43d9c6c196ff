"""Simulated water-bath accuracy experiment over many seeds.

Prints pooled pixel and 3D errors for the configured budget and, for
each budget component, the error growth when that component alone is
doubled (the other components set to zero).
"""
import argparse
import json
from dataclasses import replace

import numpy as np

from usnav.phantom import ErrorBudget, camera_attributed_error, pooled, simulate_waterbath


def component_slope(name, value, seeds, placements):
    """Least-squares slope through the origin of err(2v) against err(v)."""
    def err(v, s):
        if name == "camera_calib_error":
            return camera_attributed_error(v, s, placements).error_3d.mean
        b = replace(ErrorBudget.zero(s), **{name: v})
        return simulate_waterbath(b, placements).error_3d.mean

    x = np.array([err(value, s) for s in seeds])
    y = np.array([err(2 * value, s) for s in seeds])
    return float(x @ y / (x @ x)), float(x.mean()), float(y.mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--placements", type=int, default=1)
    ap.add_argument("--budget", help="ErrorBudget JSON; default is the built-in budget")
    ap.add_argument("--slopes", action="store_true", help="also run the per-component doubling study")
    ap.add_argument("--out")
    a = ap.parse_args()

    base = ErrorBudget()
    if a.budget:
        base = ErrorBudget.from_json(a.budget)
    runs = [simulate_waterbath(replace(base, seed=s), a.placements) for s in range(a.seeds)]
    res = pooled(runs)
    px = np.concatenate([res.pixel_left.per_point, res.pixel_right.per_point])
    out = {
        "budget": base.to_dict(),
        "seeds": a.seeds,
        "placements": a.placements,
        "pixel_mean": float(px.mean()),
        "pixel_std": float(px.std(ddof=1)),
        "error_3d_mean": res.error_3d.mean,
        "error_3d_std": res.error_3d.std,
    }
    print(f"pixel error  {out['pixel_mean']:.1f} +- {out['pixel_std']:.1f} px")
    print(f"3D error     {out['error_3d_mean']:.2f} +- {out['error_3d_std']:.2f} mm")
    if a.slopes:
        out["slopes"] = {}
        for name in ("us_calib_error", "robot_calib_error", "camera_calib_error"):
            slope, m1, m2 = component_slope(name, getattr(base, name), range(a.seeds), a.placements)
            out["slopes"][name] = {"slope": slope, "mean_at_v": m1, "mean_at_2v": m2}
            print(f"doubling {name:20s} 3D {m1:.2f} -> {m2:.2f} mm, slope {slope:.3f}")
    if a.out:
        with open(a.out, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
