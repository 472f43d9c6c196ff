"""Monte-Carlo envelopes of the point-based calibrations.

Held-out residuals for the rigid (robot/tracker) and similarity
(US image/probe) protocols, and pivot tip-offset errors.
"""
import argparse
import json

import numpy as np

from usnav.phantom import gen_pivot_poses, gen_pixel_pairs, gen_point_pairs, holdout_residual
from usnav.pointreg import fit_rigid, fit_similarity, pivot_calibrate


def summarize(x):
    x = np.asarray(x, float)
    return {"mean": float(x.mean()), "std": float(x.std(ddof=1)), "p5": float(np.percentile(x, 5)),
            "p95": float(np.percentile(x, 95))}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=500)
    ap.add_argument("--rigid-noise", type=float, default=1.0)
    ap.add_argument("--us-noise", type=float, default=0.4)
    ap.add_argument("--pivot-noise", type=float, default=0.2)
    ap.add_argument("--out", help="write the summary JSON here")
    a = ap.parse_args()

    rng = lambda s: np.random.default_rng(s)  # noqa: E731
    rigid = [holdout_residual(gen_point_pairs(100, a.rigid_noise, rng(s))[0], 50, fit_rigid)
             for s in range(a.trials)]
    sim = [holdout_residual(gen_pixel_pairs(42, a.us_noise, rng(s))[0], 25, fit_similarity)
           for s in range(a.trials)]
    tip = np.array([2.0, -3.0, 150.0])
    piv = [np.linalg.norm(pivot_calibrate(gen_pivot_poses(tip, [0, 0, -300], 20, a.pivot_noise, rng(s)))
                          .tip_offset - tip) for s in range(a.trials)]
    out = {
        "rigid_50_50_heldout_mm": summarize(rigid),
        "similarity_25_17_heldout_mm": summarize(sim),
        "pivot_tip_error_mm": summarize(piv),
    }
    for k, v in out.items():
        print(f"{k:30s} mean {v['mean']:.3f}  std {v['std']:.3f}  [p5 {v['p5']:.3f}, p95 {v['p95']:.3f}]")
    if a.out:
        with open(a.out, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
