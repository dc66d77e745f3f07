"""Command-line entry points: make-codebook, simulate, track, evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 tracking initialization failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rbpose import _kernels
from rbpose.codebook import Codebook, build_codebook, load_codebook, save_codebook
from rbpose.errors import CodebookBuildError, DomainError, FormatError, InitializationError, SequenceError
from rbpose.metrics import (
    DEFAULT_ANGLES,
    DEFAULT_PERCENTILES,
    add_metric,
    adds_metric,
    auc_threshold,
    rotation_coverage,
    rotation_errors,
    translation_errors,
)
from rbpose.observation import CameraIntrinsics
from rbpose.rbpf import FilterConfig, Tracker
from rbpose.simulator import (
    DEFAULT_INTRINSICS,
    DetectionSpec,
    NoiseSpec,
    ReplayEncoder,
    Sequence,
    SyntheticEncoder,
    SyntheticObject,
    Trajectory,
    generate_sequence,
    load_sequence,
    model_points,
    save_sequence,
)
from rbpose.so3_grid import FULL_GRID, REDUCED_GRID, RotationGrid

log = logging.getLogger("rbpose")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INIT = 0, 1, 2, 3
THREADS_ENV = "RBPOSE_THREADS"


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    codebook: str = ""
    sequence: str = ""
    output: str = "run"
    mode: str = "rgb"  # rgb | rgbd
    detections: bool = True  # reinitialize (and inject, if hybrid) from sequence detections
    seed: int = 0
    threads: int | None = None
    grid: str | None = None  # e.g. "72x37x72"; checked against the codebook
    snapshot_every: int = 10
    write_particles: bool = False
    filter: FilterConfig = field(default_factory=FilterConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter"] = self.filter.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            filt = FilterConfig.from_dict(d.pop("filter", {}))
        except (DomainError, TypeError) as exc:
            raise ConfigError(f"invalid filter config: {exc}") from exc
        return cls(filter=filt, **d)

    def validate(self) -> None:
        if self.mode not in ("rgb", "rgbd"):
            raise ConfigError(f"mode must be 'rgb' or 'rgbd', got {self.mode!r}")
        for name in ("codebook", "sequence"):
            p = getattr(self, name)
            if not p:
                raise ConfigError(f"{name} path is required")
            if not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")
        if self.grid is not None:
            parse_grid(self.grid)


def parse_grid(text: str) -> RotationGrid:
    try:
        a, e, i = (int(x) for x in text.lower().split("x"))
        return RotationGrid(a, e, i)
    except (ValueError, DomainError) as exc:
        raise ConfigError(f"bad grid {text!r}; expected AxExI such as 72x37x72") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(base: dict, pairs: list[str]) -> dict:
    """Apply ``key=value`` overrides; ``filter.key`` reaches into the filter section."""
    out = json.loads(json.dumps(base))
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        target = out
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = _parse_value(value)
    return out


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError as exc:
                raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    if n is None:
        return
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    _kernels.set_threads(n)
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


# --------------------------------------------------------------------------
# commands


def cmd_make_codebook(args) -> int:
    grid = REDUCED_GRID if args.reduced else parse_grid(args.grid) if args.grid else FULL_GRID
    spec = _read_json(args.object)
    try:
        obj = SyntheticObject.from_dict(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.object}: invalid object spec: {exc}") from exc
    if args.embeddings:
        try:
            codes = np.load(args.embeddings)
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read embeddings {args.embeddings}: {exc}") from exc
        if codes.ndim != 2 or codes.shape[0] != grid.total:
            raise FormatError(f"{args.embeddings}: expected ({grid.total}, D) codes, got {codes.shape}")
        encoder = ReplayEncoder(codes.shape[1], codes)
    else:
        encoder = SyntheticEncoder(obj)
    cb = build_codebook(encoder, grid, obj.object_id, args.z_canonical, args.s_canonical)
    save_codebook(cb, args.out)
    print(f"wrote {args.out}: {cb.grid.total} bins x {cb.dim} dims")
    return EXIT_OK


def _scenario_sequence(sc: dict, seed: int | None) -> Sequence:
    try:
        obj = SyntheticObject.from_dict(sc["object"])
        traj = Trajectory(**sc.get("trajectory", {}))
        intr = CameraIntrinsics.from_dict(sc["intrinsics"]) if "intrinsics" in sc else DEFAULT_INTRINSICS
        noise = NoiseSpec.from_dict(sc.get("noise", {}))
        det = sc.get("detections")
        absent = sc.get("absent")
        return generate_sequence(
            obj,
            traj,
            int(sc.get("n_frames", 100)),
            intr,
            noise,
            int(sc.get("seed", 0) if seed is None else seed),
            with_depth=bool(sc.get("with_depth", False)),
            absent=tuple(absent) if absent else None,
            detections=DetectionSpec(**det) if det is not None else None,
            background_depth=sc.get("background_depth"),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def cmd_simulate(args) -> int:
    sc = _read_json(args.scenario)
    seq = _scenario_sequence(sc, args.seed)
    path = save_sequence(seq, args.out)
    print(f"wrote {path}: {len(seq.frames)} frames")
    return EXIT_OK


def _encoder_for(seq: Sequence, cb: Codebook):
    if any(f.embeddings is not None for f in seq.frames):
        return ReplayEncoder(cb.dim)
    return seq.encoder(cb.z_canonical, cb.s_canonical)


def _initial_box(seq: Sequence, k: int):
    f = seq.frames[k]
    if f.detection is not None:
        return f.detection.bbox
    if f.rotation is None or f.translation is None:
        raise InitializationError(f"frame {f.index} has neither a detection nor a reference pose")
    from rbpose.scenarios import silhouette_bbox

    return silhouette_bbox(f, seq.obj)


def load_run_config(args) -> RunConfig:
    base = _read_json(args.config) if args.config else {}
    overrides = list(args.set or [])
    for key in ("codebook", "sequence", "output", "mode", "seed", "threads", "grid", "snapshot_every"):
        val = getattr(args, key, None)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    if args.particles is not None:
        overrides.append(f"filter.n_particles={args.particles}")
    if args.write_particles:
        overrides.append("write_particles=true")
    return RunConfig.from_dict(apply_overrides(base, overrides))


def cmd_track(args) -> int:
    cfg = load_run_config(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK
    cfg.validate()
    _set_threads(cfg.threads)
    cb = load_codebook(cfg.codebook)
    if cfg.grid is not None and parse_grid(cfg.grid) != cb.grid:
        raise ConfigError(f"codebook grid {cb.grid.shape} does not match configured grid {cfg.grid}")
    seq = load_sequence(cfg.sequence)
    if cfg.mode == "rgbd" and not seq.has_depth:
        raise ConfigError("rgbd mode needs depth rasters for every frame of the sequence")
    filt = cfg.filter
    filt.use_depth = cfg.mode == "rgbd"
    tracker = Tracker(cb, _encoder_for(seq, cb), filt, cfg.seed, seq.obj.shape if filt.use_depth else None,
                      reinitialize=cfg.detections)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    snap_dir = out / "snapshots"
    if cfg.snapshot_every:
        snap_dir.mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    frames = seq.frames
    if not cfg.detections:
        # keep the first box for initialization only
        for f in frames[1:]:
            f.detection = None
    with open(out / "trajectory.jsonl", "w") as fh:
        for k, f in enumerate(frames):
            rec = tracker.start(f, _initial_box(seq, 0)) if k == 0 else tracker.track(f)
            fh.write(json.dumps(rec.to_dict(cfg.write_particles)) + "\n")
            if cfg.snapshot_every and k % cfg.snapshot_every == 0:
                np.save(snap_dir / f"frame_{f.index:06d}.npy", tracker.last.distribution.astype(np.float32))
    timing = tracker.timing()
    timing["threads"] = _kernels.get_threads()
    timing["particles"] = filt.n_particles
    timing["grid_bins"] = cb.grid.total
    (out / "timing.json").write_text(json.dumps(timing, indent=2))
    ph = ", ".join(f"{k} {100 * v:.0f}%" for k, v in sorted(timing["fractions"].items()))
    print(f"tracked {timing['frames']} frames at {timing['fps']:.2f} frames/s ({ph})")
    return EXIT_OK


def _read_trajectory(path: str) -> list[dict]:
    recs = []
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    recs.append(json.loads(line))
    except FileNotFoundError as exc:
        raise ConfigError(f"trajectory not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{n}: bad record: {exc}") from exc
    for r in recs:
        if not {"frame", "translation", "rotation"} <= set(r):
            raise FormatError(f"{path}: record missing pose fields: {r}")
    return recs


def cmd_evaluate(args) -> int:
    recs = _read_trajectory(args.trajectory)
    seq = load_sequence(args.sequence)
    by_index = {f.index: f for f in seq.frames}
    if args.points:
        try:
            pts = np.load(args.points)
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot read model points {args.points}: {exc}") from exc
    else:
        pts = model_points(seq.obj)
    rows = []
    for r in recs:
        f = by_index.get(int(r["frame"]))
        if f is None or f.rotation is None:
            raise FormatError(f"frame {r['frame']} has no ground truth in {args.sequence}")
        est = (np.asarray(r["rotation"]), np.asarray(r["translation"]))
        gt = (f.rotation, f.translation)
        rows.append({
            "frame": f.index,
            "add": add_metric(est, gt, pts),
            "adds": adds_metric(est, gt, pts),
            "rotation_error_deg": float(rotation_errors(est[0], gt[0])[0]),
            "translation_error_m": float(translation_errors(est[1], gt[1])),
            "failure": bool(r.get("failure", False)),
        })
    if not rows:
        raise FormatError(f"{args.trajectory}: no records")
    add = auc_threshold([r["add"] for r in rows], args.max_threshold)
    adds = auc_threshold([r["adds"] for r in rows], args.max_threshold)
    summary = {
        "frames": len(rows),
        "add_auc": add.area,
        "adds_auc": adds.area,
        "add_mean": float(np.mean([r["add"] for r in rows])),
        "adds_mean": float(np.mean([r["adds"] for r in rows])),
        "rotation_error_median_deg": float(np.median([r["rotation_error_deg"] for r in rows])),
        "translation_error_median_m": float(np.median([r["translation_error_m"] for r in rows])),
        "failures": int(sum(r["failure"] for r in rows)),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_frame.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    with open(out / "recall.jsonl", "w") as fh:
        for t, ra, rs in zip(add.thresholds, add.recall, adds.recall):
            fh.write(json.dumps({"threshold_m": float(t), "add_recall": float(ra), "adds_recall": float(rs)}) + "\n")
    snap_dir = Path(args.snapshots) if args.snapshots else Path(args.trajectory).parent / "snapshots"
    if snap_dir.is_dir():
        dists, gts = [], []
        for p in sorted(snap_dir.glob("frame_*.npy")):
            k = int(p.stem.split("_")[1])
            if k in by_index:
                dists.append(np.load(p).astype(np.float64))
                gts.append(by_index[k].rotation)
        if dists:
            grid = _grid_for(dists[0].size)
            cov = rotation_coverage(dists, gts, DEFAULT_PERCENTILES, DEFAULT_ANGLES, grid)
            with open(out / "coverage.jsonl", "w") as fh:
                for row in cov.rows():
                    fh.write(json.dumps(row) + "\n")
            summary["coverage_frames"] = len(dists)
    (out / "metrics.json").write_text(json.dumps(summary, indent=2))
    print(_table(summary))
    return EXIT_OK


def _grid_for(total: int) -> RotationGrid:
    for g in (FULL_GRID, REDUCED_GRID):
        if g.total == total:
            return g
    raise FormatError(f"snapshot size {total} matches no known grid")


def _table(summary: dict) -> str:
    width = max(len(k) for k in summary)
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
    for k, v in summary.items():
        lines.append(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbpose", description="Particle-filter 6D pose tracking on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mk = sub.add_parser("make-codebook", help="encode every rotation bin of an object")
    mk.add_argument("--object", required=True, help="object spec (JSON)")
    mk.add_argument("--out", required=True)
    g = mk.add_mutually_exclusive_group()
    g.add_argument("--grid", help="grid as AxExI (default 72x37x72)")
    g.add_argument("--reduced", action="store_true", help="use the 12x7x12 test grid")
    mk.add_argument("--embeddings", help="precomputed (bins, D) codes in .npy instead of the synthetic encoder")
    mk.add_argument("--z-canonical", type=float, default=1.0)
    mk.add_argument("--s-canonical", type=int, default=128)
    mk.set_defaults(func=cmd_make_codebook)

    sim = sub.add_parser("simulate", help="render a synthetic sequence")
    sim.add_argument("--scenario", required=True, help="scenario (JSON)")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("track", help="run the filter over a sequence")
    tr.add_argument("--config", help="run config (JSON)")
    tr.add_argument("--codebook")
    tr.add_argument("--sequence")
    tr.add_argument("--output", "--out", dest="output")
    tr.add_argument("--mode", choices=("rgb", "rgbd"))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    tr.add_argument("--grid")
    tr.add_argument("--particles", type=int)
    tr.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    tr.add_argument("--write-particles", action="store_true")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. filter.alpha=0.5")
    tr.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    tr.set_defaults(func=cmd_track)

    ev = sub.add_parser("evaluate", help="score a trajectory against ground truth")
    ev.add_argument("--trajectory", required=True)
    ev.add_argument("--sequence", required=True)
    ev.add_argument("--points", help="model points (.npy, M x 3); default: sampled from the object proxy")
    ev.add_argument("--snapshots", help="distribution snapshot directory (default: next to the trajectory)")
    ev.add_argument("--max-threshold", type=float, default=0.1)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, SequenceError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CodebookBuildError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT


if __name__ == "__main__":
    sys.exit(main())
