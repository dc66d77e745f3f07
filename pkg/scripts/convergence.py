"""Rotation and translation error of the filter on static synthetic objects.

    python3 scripts/convergence.py --seeds 5 --frames 100 --particles 50
"""

import argparse
import json

import numpy as np

from rbpose.rbpf import FilterConfig
from rbpose.scenarios import ASYMMETRIC, codebook_for, convergence_sequence, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--particles", type=int, default=50)
    ap.add_argument("--json", help="write per-seed results here")
    args = ap.parse_args()

    cb = codebook_for(ASYMMETRIC)
    tail = args.frames // 2
    rows = []
    print(f"{'seed':>4}  {'rot med (deg)':>13}  {'trans med (cm)':>14}  {'failures':>8}  {'fps':>6}")
    for seed in range(args.seeds):
        r = run(convergence_sequence(seed, args.frames), cb, FilterConfig(n_particles=args.particles), seed=seed)
        row = {
            "seed": seed,
            "rotation_median_deg": float(np.median(r.rot_err[-tail:])),
            "translation_median_cm": float(100 * np.median(r.trans_err[-tail:])),
            "failures": int(r.failures.sum()),
            "fps": r.timing["fps"],
            "rotation_error_deg": r.rot_err.tolist(),
        }
        rows.append(row)
        print(f"{seed:>4}  {row['rotation_median_deg']:>13.2f}  {row['translation_median_cm']:>14.2f}"
              f"  {row['failures']:>8}  {row['fps']:>6.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
