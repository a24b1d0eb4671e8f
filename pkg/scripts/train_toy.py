"""Train the encoder for the toy setting (tube_stack, 64x64 detector) and save a checkpoint.

    python scripts/train_toy.py --iterations 2000 --out checkpoints/toy_encoder
"""

import argparse
import time

import numpy as np

from corrreg.drr import toy_geometry
from corrreg.training import toy_train_config, train
from corrreg.volume import make_phantom


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="toy_encoder")
    ap.add_argument("--log", default=None)
    a = ap.parse_args()

    V = make_phantom("tube_stack", 64, spacing=2.0)
    cfg = toy_train_config(iterations=a.iterations, seed=a.seed)
    t0 = time.perf_counter()
    state, records = train(V, toy_geometry(64), cfg, log_path=a.log, checkpoint_path=a.out,
                           progress=lambda r: r["iter"] % 200 or print(r["iter"], r.get("l_appro"), flush=True))
    la = np.array([r.get("l_appro", np.nan) for r in records])
    k = max(1, len(la) // 10)
    print(f"median L_appro first 10%: {np.nanmedian(la[:k]):.3f}  last 10%: {np.nanmedian(la[-k:]):.3f}")
    print(f"{time.perf_counter() - t0:.0f} s, checkpoint at {a.out}")


if __name__ == "__main__":
    main()
