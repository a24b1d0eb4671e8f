"""GC + CMA-ES from small offsets (N(0, 5 deg) / N(0, 10 mm) per axis) on the tube_stack phantom."""

import argparse
from dataclasses import replace

import numpy as np

from corrreg.drr import toy_geometry
from corrreg.evaluation import make_cases, mtre
from corrreg.registration import REGISTRATION_CMAES, metric_register_cmaes
from corrreg.se3 import PoseDistribution
from corrreg.volume import make_phantom


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    a = ap.parse_args()

    V = make_phantom("tube_stack", 64, spacing=2.0)
    geom = toy_geometry(64)
    lm = V.corner_landmarks()
    cases = make_cases(V, geom, PoseDistribution((5.0, 5.0, 5.0), (10.0, 10.0, 10.0)), a.trials, a.seed)
    tres = []
    for c in cases:
        res = metric_register_cmaes(V, c.image, c.initial, geom, "gc", replace(REGISTRATION_CMAES, seed=c.seed % 2**32))
        tres.append(mtre(res.final_pose, c.target, lm))
        print(f"trial {c.index:2d}  start {mtre(c.initial, c.target, lm):6.2f}  final {tres[-1]:6.2f} mm", flush=True)
    print(f"SR {100 * np.mean(np.array(tres) < 10):.1f}%")


if __name__ == "__main__":
    main()
