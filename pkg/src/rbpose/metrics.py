"""Pose accuracy metrics and rotation-posterior analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rbpose.errors import DomainError
from rbpose.so3_grid import FULL_GRID, RotationGrid, geodesic_distance, grid_quaternions, quat_to_matrix

Pose = tuple[np.ndarray, np.ndarray]  # (unit quaternion, translation)

DEFAULT_PERCENTILES = (1, 2, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100)
DEFAULT_ANGLES = (0.0, 10.0, 20.0)


def _points(mp: np.ndarray) -> np.ndarray:
    p = np.asarray(mp, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise DomainError("empty model point set")
    if not np.all(np.isfinite(p)):
        raise DomainError("model points must be finite")
    return p


def transform(pose: Pose, points: np.ndarray) -> np.ndarray:
    q, t = pose
    return points @ quat_to_matrix(np.asarray(q, dtype=np.float64)).T + np.asarray(t, dtype=np.float64)


def add_metric(pose_est: Pose, pose_gt: Pose, mp: np.ndarray) -> float:
    p = _points(mp)
    return float(np.mean(np.linalg.norm(transform(pose_est, p) - transform(pose_gt, p), axis=1)))


def adds_metric(pose_est: Pose, pose_gt: Pose, mp: np.ndarray, chunk: int = 1024) -> float:
    p = _points(mp)
    est = transform(pose_est, p)
    gt = transform(pose_gt, p)
    est_sq = np.einsum("ij,ij->i", est, est)
    best = np.empty(gt.shape[0])
    for lo in range(0, gt.shape[0], chunk):
        g = gt[lo:lo + chunk]
        d2 = np.einsum("ij,ij->i", g, g)[:, None] - 2.0 * g @ est.T + est_sq[None, :]
        best[lo:lo + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return float(best.mean())


@dataclass
class RecallCurve:
    thresholds: np.ndarray
    recall: np.ndarray
    area: float


def auc_threshold(values, max_threshold: float = 0.1, n_steps: int = 1000) -> RecallCurve:
    """Recall (fraction of values strictly below t) on ``t = max * k / n, k = 1..n``.

    The area is the mean recall over that grid, so it lies in [0, 1].
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("no metric values")
    if not max_threshold > 0:
        raise DomainError("max_threshold must be positive")
    thr = max_threshold * np.arange(1, n_steps + 1) / n_steps
    s = np.sort(v)
    recall = np.searchsorted(s, thr, side="left") / v.size
    return RecallCurve(thr, recall, float(recall.mean()))


# --------------------------------------------------------------------------
# coverage


@dataclass
class CoverageCurve:
    percentiles: np.ndarray
    thresholds: np.ndarray
    hit_rates: np.ndarray  # (len(thresholds), len(percentiles))

    def rows(self) -> list[dict]:
        return [
            {"threshold_deg": float(a), "percentile": float(p), "hit_rate": float(self.hit_rates[i, j])}
            for i, a in enumerate(self.thresholds)
            for j, p in enumerate(self.percentiles)
        ]


def coverage_distances(dist: np.ndarray, gt: np.ndarray, percentiles, grid: RotationGrid = FULL_GRID) -> np.ndarray:
    """Smallest gt-to-bin geodesic distance among the top-p% bins, per percentile.

    Bins are ranked by probability (ties by index); zero-probability bins are
    never selected, so a percentile that would reach them uses fewer bins.
    """
    p = np.asarray(dist, dtype=np.float64).ravel()
    if p.size != grid.total:
        raise DomainError("distribution does not match the grid")
    order = np.argsort(-p, kind="stable")
    n_pos = int(np.count_nonzero(p > 0))
    order = order[:n_pos]
    out = np.full(len(percentiles), np.inf)
    if n_pos == 0:
        return out
    d = geodesic_distance(grid_quaternions(grid)[order], np.asarray(gt, dtype=np.float64))
    running = np.minimum.accumulate(np.atleast_1d(d))
    for j, pct in enumerate(percentiles):
        k = min(n_pos, max(1, math.ceil(pct / 100.0 * grid.total)))
        out[j] = running[k - 1]
    return out


def rotation_coverage(
    dists,
    gt_rotations,
    percentiles=DEFAULT_PERCENTILES,
    angle_thresholds=DEFAULT_ANGLES,
    grid: RotationGrid = FULL_GRID,
) -> CoverageCurve:
    pct = np.asarray(percentiles, dtype=np.float64)
    if np.any(pct <= 0) or np.any(pct > 100):
        raise DomainError("percentiles must lie in (0, 100]")
    ang = np.asarray(angle_thresholds, dtype=np.float64)
    gts = np.asarray(gt_rotations, dtype=np.float64).reshape(-1, 4)
    hits = np.zeros((ang.size, pct.size))
    n = 0
    for dist, gt in zip(dists, gts):
        dmin = coverage_distances(dist, gt, pct, grid)
        # a tiny slack absorbs rounding in the arccos of exactly matching bins
        hits += dmin[None, :] <= ang[:, None] + 1e-6
        n += 1
    if n:
        hits /= n
    return CoverageCurve(pct, ang, hits)


def gaussian_baseline(center: np.ndarray, sigma_deg: float, grid: RotationGrid = FULL_GRID) -> np.ndarray:
    """Unimodal distribution over the grid: Gaussian in geodesic distance from ``center``."""
    d = geodesic_distance(grid_quaternions(grid), np.asarray(center, dtype=np.float64))
    w = np.exp(-0.5 * (d / sigma_deg) ** 2)
    return w / w.sum()


# --------------------------------------------------------------------------
# posterior shape


def _window_max(v: np.ndarray, radius: int, axis: int, wrap: bool) -> np.ndarray:
    out = v.copy()
    n = v.shape[axis]
    for s in range(1, radius + 1):
        for sh in (s, -s):
            if wrap:
                out = np.maximum(out, np.roll(v, sh, axis=axis))
            else:
                shifted = np.full_like(v, -np.inf)
                src = [slice(None)] * v.ndim
                dst = [slice(None)] * v.ndim
                if sh > 0:
                    src[axis], dst[axis] = slice(0, n - sh), slice(sh, n)
                else:
                    src[axis], dst[axis] = slice(-sh, n), slice(0, n + sh)
                shifted[tuple(dst)] = v[tuple(src)]
                out = np.maximum(out, shifted)
    return out


def find_modes(
    dist: np.ndarray,
    grid: RotationGrid = FULL_GRID,
    radius: int = 3,
    median_factor: float = 10.0,
    rel_floor: float = 0.0,
    merge_deg: float | None = None,
) -> np.ndarray:
    """Bin indices of local maxima of a rotation distribution, strongest first.

    A mode is a bin that equals the maximum of the ``(2r+1)^3`` window around
    it (azimuth and in-plane wrap) and exceeds ``median_factor`` times the
    median bin and ``rel_floor`` times the peak. Modes describing nearly the
    same rotation (within ``merge_deg``, default two grid steps) are merged;
    this collapses plateaus and the duplicated bins near the elevation poles.
    """
    v = np.asarray(dist, dtype=np.float64).reshape(grid.shape)
    m = _window_max(v, radius, 2, True)
    m = _window_max(m, radius, 1, False)
    m = _window_max(m, radius, 0, True)
    floor = max(median_factor * float(np.median(v)), rel_floor * float(v.max()))
    cand = np.flatnonzero(((v == m) & (v > floor)).ravel())
    cand = cand[np.argsort(-v.ravel()[cand], kind="stable")]
    merge = 2.0 * grid.step if merge_deg is None else merge_deg
    quats = grid_quaternions(grid)
    kept: list[int] = []
    for c in cand:
        if all(geodesic_distance(quats[c], quats[k]) > merge for k in kept):
            kept.append(int(c))
    return np.asarray(kept, dtype=np.int64)


def marginals(dist: np.ndarray, grid: RotationGrid = FULL_GRID) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Azimuth, elevation and in-plane marginals of a grid distribution."""
    v = np.asarray(dist, dtype=np.float64).reshape(grid.shape)
    v = v / v.sum()
    return v.sum(axis=(1, 2)), v.sum(axis=(0, 2)), v.sum(axis=(0, 1))


# --------------------------------------------------------------------------
# per-frame errors


def rotation_errors(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.atleast_1d(geodesic_distance(np.asarray(est), np.asarray(gt)))


def translation_errors(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(est) - np.asarray(gt), axis=-1)
