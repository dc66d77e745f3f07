"""Reusable synthetic tracking scenarios and a small run harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from rbpose.codebook import Codebook, build_codebook
from rbpose.observation import Frame, render_depth_image
from rbpose.rbpf import FilterConfig, Tracker, TrackRecord
from rbpose.simulator import (
    Box,
    DetectionSpec,
    NoiseSpec,
    Occluder,
    Sequence,
    Sphere,
    SymmetrySpec,
    SyntheticEncoder,
    SyntheticObject,
    Trajectory,
    generate_sequence,
)
from rbpose.so3_grid import FULL_GRID, RotationGrid, euler_to_quaternion, geodesic_distance

ASYMMETRIC = SyntheticObject("box", SymmetrySpec(), code_seed=11, shape=Box((0.12, 0.16, 0.06)))
BOWL = SyntheticObject("bowl", SymmetrySpec("revolution", axis="azimuth"), code_seed=23, shape=Sphere(0.08))
CYCLIC2 = SyntheticObject("brick", SymmetrySpec("cyclic", 2, "azimuth"), code_seed=37, shape=Box((0.12, 0.16, 0.06)))


@lru_cache(maxsize=8)
def codebook_for(obj: SyntheticObject, grid: RotationGrid = FULL_GRID) -> Codebook:
    return build_codebook(SyntheticEncoder(obj), grid, obj.object_id)


def random_rotation(rng: np.random.Generator, max_elevation: float = 45.0) -> np.ndarray:
    az = rng.uniform(0.0, 360.0)
    el = rng.uniform(-max_elevation, max_elevation)
    ip = rng.uniform(-180.0, 180.0)
    return euler_to_quaternion(np.array([az, el, ip]))


def silhouette_bbox(frame: Frame, obj: SyntheticObject) -> tuple[float, float, float, float]:
    img = render_depth_image((frame.rotation, frame.translation), obj.shape, frame.intrinsics)
    rows, cols = np.nonzero(img > 0)
    return float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)


@dataclass
class RunResult:
    records: list[TrackRecord]
    rot_err: np.ndarray
    trans_err: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def failures(self) -> np.ndarray:
        return np.array([r.failed for r in self.records])


def run(
    seq: Sequence,
    cb: Codebook,
    config: FilterConfig = FilterConfig(),
    seed: int = 0,
    reinitialize: bool = False,
    snapshot_frames=(),
) -> RunResult:
    """Track a synthetic sequence from a silhouette box on its first frame."""
    shape = seq.obj.shape if config.use_depth else None
    tr = Tracker(cb, seq.encoder(cb.z_canonical, cb.s_canonical), config, seed, shape, reinitialize)
    first = seq.frames[0]
    records = [tr.start(first, silhouette_bbox(first, seq.obj))]
    snaps = {}
    want = set(snapshot_frames)
    if 0 in want:
        snaps[0] = tr.last.distribution.copy()
    for f in seq.frames[1:]:
        records.append(tr.track(f))
        if f.index in want:
            snaps[f.index] = tr.last.distribution.copy()
    rot = np.array([geodesic_distance(r.rotation, f.rotation) for r, f in zip(records, seq.frames)])
    trans = np.array([np.linalg.norm(r.translation - f.translation) for r, f in zip(records, seq.frames)])
    return RunResult(records, rot, trans, snaps, tr.timing())


# --------------------------------------------------------------------------
# scenario builders


def static_sequence(obj: SyntheticObject, seed: int, n_frames: int, noise: NoiseSpec, **kw) -> Sequence:
    rng = np.random.default_rng([seed, 7])
    q = random_rotation(rng)
    t = (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 1.0)
    return generate_sequence(obj, Trajectory("static", tuple(q), t), n_frames, noise=noise, seed=seed, **kw)


def convergence_sequence(seed: int, n_frames: int = 100) -> Sequence:
    return static_sequence(ASYMMETRIC, seed, n_frames, NoiseSpec(code_noise=0.1))


def revolution_sequence(seed: int, n_frames: int = 20) -> Sequence:
    return static_sequence(BOWL, seed, n_frames, NoiseSpec(code_noise=0.1))


def cyclic_sequence(seed: int, n_frames: int = 20) -> Sequence:
    return static_sequence(CYCLIC2, seed, n_frames, NoiseSpec(code_noise=0.1))


def sweeping_cyclic_sequence(seed: int, n_frames: int = 72, deg_per_frame: float = 5.0) -> Sequence:
    """Cyclic(2) object turning about its symmetry axis through a full revolution."""
    rng = np.random.default_rng([seed, 7])
    el = rng.uniform(-30.0, 30.0)
    ip = rng.uniform(-90.0, 90.0)
    az0 = rng.uniform(0.0, 360.0)
    wps = [
        {"frame": k, "rotation": euler_to_quaternion(np.array([az0 + deg_per_frame * k, el, ip])).tolist(),
         "translation": [0.0, 0.0, 1.0]}
        for k in range(n_frames)
    ]
    return generate_sequence(CYCLIC2, Trajectory("waypoints", waypoints=wps), n_frames,
                             noise=NoiseSpec(code_noise=0.1), seed=seed)


def occluded_sequence(
    seed: int, n_frames: int = 40, fraction: float = 0.3, roi_bias: float = 0.5, sigma_logscale: float = 0.1
) -> Sequence:
    noise = NoiseSpec(code_noise=0.05, depth_noise=0.002, sigma_logscale=sigma_logscale,
                      occluder=Occluder(fraction, 0.1, "left", roi_bias))
    return static_sequence(ASYMMETRIC, seed, n_frames, noise, with_depth=True, background_depth=1.6)


def dropout_sequence(seed: int, n_frames: int = 90, absent: tuple[int, int] = (50, 70)) -> Sequence:
    return static_sequence(ASYMMETRIC, seed, n_frames, NoiseSpec(code_noise=0.05), absent=absent,
                           detections=DetectionSpec())
