"""Table-style comparison of initial / CMA-ES / learned / pipeline registration on simulated cases.

    python scripts/run_table.py --cases 30 --offset-scale 0.5 --out table.json
"""

import argparse
import time

from corrreg.drr import toy_geometry
from corrreg.evaluation import batch_evaluate, format_table, write_report
from corrreg.se3 import TEST_DISTRIBUTION
from corrreg.training import load_checkpoint
from corrreg.volume import make_phantom
from corrreg import shipped_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=30)
    ap.add_argument("--offset-scale", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoint", default=None, help="default: the shipped toy checkpoint")
    ap.add_argument("--methods", default="initial,cmaes,net,net+cmaes")
    ap.add_argument("--out", default=None)
    a = ap.parse_args()

    V = make_phantom("tube_stack", 64, spacing=2.0)
    params, enc = load_checkpoint(a.checkpoint or shipped_checkpoint())
    t0 = time.perf_counter()
    reports = batch_evaluate(V, toy_geometry(64), params, TEST_DISTRIBUTION.scaled(a.offset_scale), a.cases,
                             a.methods.split(","), a.seed, enc,
                             progress=lambda m, i, t: print(f"{m:10s} case {i:3d} mTRE {t:7.2f}", flush=True))
    print(format_table(list(reports.values())), end="")
    print(f"{time.perf_counter() - t0:.0f} s")
    if a.out:
        write_report(reports, a.out)


if __name__ == "__main__":
    main()
