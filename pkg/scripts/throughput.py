"""Frames per second of RGB tracking on the full grid, with a per-phase breakdown.

    python3 scripts/throughput.py --frames 100 --particles 50 --threads 8
"""

import argparse
import json

import numpy as np
from threadpoolctl import threadpool_limits

from rbpose import _kernels
from rbpose.rbpf import FilterConfig, Tracker
from rbpose.scenarios import ASYMMETRIC, codebook_for
from rbpose.simulator import DetectionSpec, NoiseSpec, Trajectory, generate_sequence
from rbpose.so3_grid import euler_to_quaternion


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--particles", type=int, default=50)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()

    if args.threads:
        _kernels.set_threads(args.threads)
        threadpool_limits(args.threads)
    cb = codebook_for(ASYMMETRIC)
    q = euler_to_quaternion(np.array([40.0, 25.0, -30.0]))
    traj = Trajectory("linear", tuple(q), (0.05, -0.03, 1.0), velocity=(0.001, 0, 0), angular_velocity=(0, 2, 0))
    seq = generate_sequence(ASYMMETRIC, traj, args.frames + args.warmup + 1, noise=NoiseSpec(code_noise=0.05),
                            seed=0, detections=DetectionSpec())
    tr = Tracker(cb, seq.encoder(), FilterConfig(n_particles=args.particles), seed=0)
    tr.start(seq.frames[0], seq.frames[0].detection.bbox)
    for f in seq.frames[1:args.warmup + 1]:
        tr.track(f)
    # time only the steady state
    tr.timer.totals.clear()
    tr.elapsed, tr.frames = 0.0, 0
    for f in seq.frames[args.warmup + 1:]:
        tr.track(f)
    t = tr.timing()
    t["threads"] = _kernels.get_threads()
    print(f"{t['frames']} frames, {t['fps']:.2f} frames/s, {t['threads']} thread(s)")
    for k, v in sorted(t["phases"].items(), key=lambda kv: -kv[1]):
        print(f"  {k:<12} {1000 * v / t['frames']:7.1f} ms/frame  {100 * t['fractions'][k]:5.1f}%")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(t, fh, indent=2)


if __name__ == "__main__":
    main()
