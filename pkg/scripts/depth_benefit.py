"""RGB against RGB-D tracking of a partly occluded object.

    python3 scripts/depth_benefit.py --seeds 5 --fraction 0.3
"""

import argparse

import numpy as np

from rbpose.rbpf import FilterConfig
from rbpose.scenarios import ASYMMETRIC, codebook_for, occluded_sequence, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--frames", type=int, default=40)
    ap.add_argument("--fraction", type=float, default=0.3, help="occluded share of the object area")
    ap.add_argument("--particles", type=int, default=50)
    args = ap.parse_args()

    cb = codebook_for(ASYMMETRIC)
    print(f"{'seed':>4}  {'rgb t (cm)':>10}  {'rgbd t (cm)':>11}  {'ratio':>5}  {'rgb R (deg)':>11}  {'rgbd R (deg)':>12}")
    ratios = []
    for seed in range(args.seeds):
        seq = occluded_sequence(seed, args.frames, args.fraction)
        a = run(seq, cb, FilterConfig(n_particles=args.particles), seed=seed)
        b = run(seq, cb, FilterConfig(n_particles=args.particles, use_depth=True), seed=seed)
        ta, tb = np.median(a.trans_err), np.median(b.trans_err)
        ratios.append(tb / ta)
        print(f"{seed:>4}  {100 * ta:>10.2f}  {100 * tb:>11.2f}  {tb / ta:>5.2f}"
              f"  {np.median(a.rot_err):>11.1f}  {np.median(b.rot_err):>12.1f}")
    print(f"median ratio {np.median(ratios):.2f}")


if __name__ == "__main__":
    main()
