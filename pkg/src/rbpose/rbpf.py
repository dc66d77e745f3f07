"""Rao-Blackwellized particle filter over translation with per-particle rotation grids.

Each particle samples a translation and carries an exact discrete
distribution over the rotation grid conditioned on it. Rotation rows are
shared between particles with the same ancestor (``dist_index``) so that
resampling never copies 191,808-bin arrays and the motion kernel is applied
once per distinct row.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from rbpose import _kernels
from rbpose.codebook import Codebook, Encoder
from rbpose.errors import DomainError, InitializationError
from rbpose.observation import (
    DEPTH_RASTER,
    MIN_OVERLAP,
    SENTINEL_SCORE,
    Box,
    Frame,
    Sphere,
    backproject,
    color_scores,
    depth_log_likelihoods,
    evaluate_depth,
)
from rbpose.so3_grid import (
    GridKernel,
    RotationDistribution,
    RotationGrid,
    convolve_rows,
    gaussian_kernel,
    grid_quaternions,
    quaternion_weighted_average,
)


@dataclass
class FilterConfig:
    n_particles: int = 50
    alpha: float = 0.9
    sigma_t: tuple[float, float, float] = (0.01, 0.01, 0.025)
    sigma_r: tuple[float, float, float] = (5.0, 5.0, 5.0)
    sigma_sim: float = 0.05
    sigma_depth: float = 0.05
    failure_threshold: float = 0.6
    z_canonical: float | None = None  # None: take from the codebook
    s_canonical: float | None = None
    expectation_neighborhood: float = 10.0
    use_depth: bool = False
    hybrid_fraction: float = 0.0
    depth_margin: float = 0.02
    depth_tau: float = 0.05
    depth_raster: int = DEPTH_RASTER
    init_z_range: tuple[float, float] = (0.3, 3.0)
    init_z_samples: int = 50
    min_roi_overlap: float = MIN_OVERLAP
    kernel_truncation: float = 3.0

    def __post_init__(self) -> None:
        self.sigma_t = tuple(float(x) for x in np.broadcast_to(self.sigma_t, 3))
        self.sigma_r = tuple(float(x) for x in np.broadcast_to(self.sigma_r, 3))
        self.init_z_range = tuple(float(x) for x in self.init_z_range)
        self.validate()

    def validate(self) -> None:
        if self.n_particles < 1:
            raise DomainError("n_particles must be >= 1")
        stds = (*self.sigma_t, *self.sigma_r, self.sigma_sim, self.sigma_depth, self.depth_tau)
        if not all(s > 0 for s in stds):
            raise DomainError("all standard deviations must be positive")
        if not 0.0 <= self.hybrid_fraction <= 1.0:
            raise DomainError("hybrid_fraction must lie in [0, 1]")
        z0, z1 = self.init_z_range
        if not (0 < z0 < z1) or self.init_z_samples < 1:
            raise DomainError("invalid initialization depth range")
        if not self.expectation_neighborhood > 0:
            raise DomainError("expectation_neighborhood must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FilterConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown filter options: {sorted(unknown)}")
        return cls(**d)


class PhaseTimer:
    """Accumulates wall time per named phase."""

    def __init__(self) -> None:
        self.totals: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] = self.totals.get(name, 0.0) + time.perf_counter() - t0


@contextmanager
def _null(name: str):
    yield


@dataclass
class Particle:
    translation: np.ndarray
    rotation_dist: RotationDistribution
    weight: float


@dataclass
class FilterState:
    translations: np.ndarray       # (N, 3)
    prev_translations: np.ndarray  # (N, 3), one step earlier
    dists: np.ndarray              # (U, total) rotation rows
    dist_index: np.ndarray         # (N,) row of each particle
    weights: np.ndarray            # (N,)
    grid: RotationGrid
    prev_rotation: np.ndarray | None = None
    frame_index: int = 0

    @property
    def n(self) -> int:
        return self.translations.shape[0]

    def rotation(self, i: int) -> RotationDistribution:
        return RotationDistribution(self.dists[self.dist_index[i]], self.grid)

    @property
    def particles(self) -> list[Particle]:
        return [Particle(self.translations[i], self.rotation(i), float(self.weights[i])) for i in range(self.n)]

    def particle_dists(self) -> np.ndarray:
        """Dense ``(N, total)`` copy of every particle's rotation row."""
        return self.dists[self.dist_index]


@dataclass
class UpdateInfo:
    max_score: float
    log_weights: np.ndarray
    starved: int
    degenerate: bool = False


@dataclass
class Expectation:
    translation: np.ndarray
    rotation: np.ndarray
    distribution: np.ndarray  # per-bin max over particles
    fallback: bool = False


# --------------------------------------------------------------------------
# posterior rows


def posterior_update(
    scores: np.ndarray,
    prior: np.ndarray,
    src: np.ndarray,
    s_max: float,
    sigma: float,
    out: np.ndarray,
    log_w: np.ndarray,
) -> None:
    """Score likelihood times prior, normalised per row, with log row sums.

    ``out[r] = normalize(exp(-(s_max - scores[r])^2 / 2 sigma^2) * prior[src[r]])``
    and ``log_w[r]`` is the log of the unnormalised sum. Rows whose sum
    underflows are recomputed in log space. Works one row at a time so the
    temporaries stay in cache.
    """
    c = 1.0 / (2.0 * sigma * sigma)
    d = np.empty(scores.shape[1])
    for r in range(scores.shape[0]):
        _kernels.neg_scaled_sq_gap(s_max, scores[r], c, d)
        o = out[r]
        p = prior[src[r]]
        np.exp(d, out=o)
        acc = _kernels.multiply_sum(o, p)
        if acc > 0 and np.isfinite(acc):
            o *= 1.0 / acc
            log_w[r] = math.log(acc)
            continue
        with np.errstate(divide="ignore"):
            lp = d + np.log(p)
        m = lp.max()
        if not np.isfinite(m):
            o[:] = 0.0
            log_w[r] = -np.inf
            continue
        np.exp(lp - m, out=o)
        acc = o.sum()
        o *= 1.0 / acc
        log_w[r] = m + math.log(acc)


def _depth_log_weights(frame: Frame, cs, translations, grid, config: FilterConfig, shape) -> np.ndarray:
    """Depth log-likelihood of each hypothesis rendered at its best colour rotation."""
    if frame.depth is None:
        raise DomainError(f"frame {frame.index} has no depth image")
    if shape is None:
        raise DomainError("depth scoring needs the object's proxy shape")
    best = np.argmax(cs.scores, axis=1)
    rot = grid_quaternions(grid)[best]
    v, delta = evaluate_depth(
        frame, shape, rot, translations, cs.rois, config.depth_margin, config.depth_tau, config.depth_raster
    )
    v[cs.starved] = 0.0
    delta[cs.starved] = 1.0
    return depth_log_likelihoods(v, delta, config.sigma_depth)


# --------------------------------------------------------------------------
# initialization


def _check_bbox(bbox, frame: Frame) -> tuple[float, float]:
    u0, v0, u1, v1 = (float(x) for x in bbox)
    c = frame.intrinsics
    if not (u1 > u0 and v1 > v0) or not np.all(np.isfinite([u0, v0, u1, v1])):
        raise InitializationError(f"degenerate bounding box {bbox}")
    u, v = (u0 + u1) / 2.0, (v0 + v1) / 2.0
    if not (0 <= u < c.width and 0 <= v < c.height):
        raise InitializationError(f"bounding box center ({u:.1f}, {v:.1f}) outside the image")
    return u, v


def initialize(
    frame: Frame,
    bbox,
    cb: Codebook,
    encoder: Encoder,
    config: FilterConfig,
    n_depth_samples: int | None = None,
    z_range: tuple[float, float] | None = None,
    shape: Sphere | Box | None = None,
) -> FilterState:
    """Seed every particle at the most likely back-projected depth candidate.

    With ``config.use_depth`` the candidate likelihood includes the depth
    term, as it does during tracking.
    """
    u, v = _check_bbox(bbox, frame)
    z0, z1 = config.init_z_range if z_range is None else z_range
    n_z = config.init_z_samples if n_depth_samples is None else n_depth_samples
    cands = backproject(u, v, np.linspace(z0, z1, n_z), frame.intrinsics)
    cs = color_scores(frame, cands, cb, encoder, config.z_canonical, config.s_canonical, config.min_roi_overlap)
    if cs.starved.all():
        raise InitializationError("every depth candidate projects outside the image")
    total = cb.grid.total
    uniform = np.full((1, total), 1.0 / total)
    post = np.empty((n_z, total))
    log_w = np.empty(n_z)
    posterior_update(
        cs.scores, uniform, np.zeros(n_z, dtype=np.int64), cs.max_score, config.sigma_sim, post, log_w
    )
    if config.use_depth:
        log_w += _depth_log_weights(frame, cs, cands, cb.grid, config, shape)
    log_w[cs.starved] = -np.inf
    best = int(np.argmax(log_w))
    n = config.n_particles
    t = np.repeat(cands[best][None], n, axis=0)
    return FilterState(
        translations=t,
        prev_translations=t.copy(),
        dists=post[best][None].copy(),
        dist_index=np.zeros(n, dtype=np.int64),
        weights=np.full(n, 1.0 / n),
        grid=cb.grid,
        prev_rotation=None,
        frame_index=frame.index,
    )


# --------------------------------------------------------------------------
# motion


def rotation_kernel(config: FilterConfig, grid: RotationGrid) -> GridKernel:
    return gaussian_kernel(config.sigma_r, config.kernel_truncation, grid)


def propagate(
    state: FilterState,
    config: FilterConfig,
    rng: np.random.Generator,
    kernel: GridKernel | None = None,
    timer=_null,
) -> FilterState:
    t, tp = state.translations, state.prev_translations
    mean = t + config.alpha * (t - tp)
    new_t = mean + rng.normal(0.0, 1.0, t.shape) * np.asarray(config.sigma_t)
    kernel = rotation_kernel(config, state.grid) if kernel is None else kernel
    rows, inverse = np.unique(state.dist_index, return_inverse=True)
    with timer("convolution"):
        dists = convolve_rows(state.dists, kernel, state.grid, rows=rows)
    return replace(
        state,
        translations=new_t,
        prev_translations=t.copy(),
        dists=dists,
        dist_index=inverse.astype(np.int64).ravel(),
    )


def hybrid_inject(
    state: FilterState,
    detection_translation: np.ndarray | None,
    config: FilterConfig,
    rng: np.random.Generator,
) -> FilterState:
    """Re-seed ``round(hybrid_fraction * N)`` random particles around a detected translation."""
    k = int(round(config.hybrid_fraction * state.n))
    if k == 0 or detection_translation is None:
        return state
    idx = np.sort(rng.choice(state.n, size=k, replace=False))
    t = state.translations.copy()
    tp = state.prev_translations.copy()
    det = np.asarray(detection_translation, dtype=np.float64)
    t[idx] = det + rng.normal(0.0, 1.0, (k, 3)) * np.asarray(config.sigma_t)
    tp[idx] = t[idx]  # no velocity for fresh particles
    total = state.grid.total
    dists = np.concatenate([state.dists, np.full((1, total), 1.0 / total)])
    dist_index = state.dist_index.copy()
    dist_index[idx] = dists.shape[0] - 1
    return replace(state, translations=t, prev_translations=tp, dists=dists, dist_index=dist_index)


# --------------------------------------------------------------------------
# measurement


def update(
    state: FilterState,
    frame: Frame,
    cb: Codebook,
    encoder: Encoder,
    config: FilterConfig,
    shape: Sphere | Box | None = None,
    timer=_null,
    out: np.ndarray | None = None,
) -> tuple[FilterState, UpdateInfo]:
    if cb.grid != state.grid:
        raise DomainError("codebook grid does not match the filter grid")
    n, total = state.n, state.grid.total
    cs = color_scores(
        frame, state.translations, cb, encoder, config.z_canonical, config.s_canonical,
        config.min_roi_overlap, timer=timer,
    )
    if out is None or out.shape != (n, total):
        out = np.empty((n, total))
    log_w = np.empty(n)
    with timer("similarity"):
        posterior_update(cs.scores, state.dists, state.dist_index, cs.max_score, config.sigma_sim, out, log_w)
    if config.use_depth:
        with timer("depth"):
            log_w = log_w + _depth_log_weights(frame, cs, state.translations, state.grid, config, shape)
    top = log_w.max()
    degenerate = not np.isfinite(top)
    if degenerate:
        weights = np.full(n, 1.0 / n)
    else:
        w = np.exp(log_w - top)
        weights = w / w.sum()
    raw_max = cs.max_score if (~cs.starved).any() else SENTINEL_SCORE
    new = replace(
        state,
        dists=out,
        dist_index=np.arange(n, dtype=np.int64),
        weights=weights,
        frame_index=frame.index,
    )
    return new, UpdateInfo(raw_max, log_w, int(cs.starved.sum()), degenerate)


def detect_failure(max_similarity: float, config: FilterConfig) -> bool:
    return bool(max_similarity < config.failure_threshold)


# --------------------------------------------------------------------------
# resampling and expectation


def systematic_indices(weights: np.ndarray, offset: float, n: int | None = None) -> np.ndarray:
    """Ancestor indices for ``n`` offspring (default: one per weight) at positions ``offset + k/n``."""
    n = weights.size if n is None else n
    cum = np.cumsum(weights)
    cum /= cum[-1]
    cum[-1] = 1.0
    pos = offset + np.arange(n) / n
    return np.minimum(np.searchsorted(cum, pos, side="right"), weights.size - 1)


def resample_systematic(
    state: FilterState, rng: np.random.Generator | None = None, offset: float | None = None
) -> FilterState:
    w = np.asarray(state.weights, dtype=np.float64)
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0) or not w.sum() > 0:
        raise DomainError("cannot resample degenerate weights")
    n = w.size
    if offset is None:
        offset = (rng if rng is not None else np.random.default_rng()).uniform(0.0, 1.0 / n)
    idx = systematic_indices(w / w.sum(), offset)
    return replace(
        state,
        translations=state.translations[idx],
        prev_translations=state.prev_translations[idx],
        dist_index=state.dist_index[idx],
        weights=np.full(n, 1.0 / n),
    )


def max_combined(state: FilterState) -> np.ndarray:
    rows = np.unique(state.dist_index)
    out = np.empty(state.grid.total)
    _kernels.rows_max(state.dists, rows.astype(np.int64), out)
    return out


def pose_expectation(state: FilterState, config: FilterConfig) -> Expectation:
    """Mean translation and a gated weighted-average rotation.

    The rotation average only uses bins within ``expectation_neighborhood``
    degrees of the previous estimate, which keeps it on one mode of a
    multimodal posterior. When that neighborhood holds nothing comparable to
    the global peak (below 1e-6 of it) the global argmax bin is used.
    """
    w = state.weights / state.weights.sum()
    t = w @ state.translations
    p = max_combined(state)
    quats = grid_quaternions(state.grid)
    peak = p.max()
    if state.prev_rotation is None:
        mask = p > 0
    else:
        cos_half = np.cos(np.radians(config.expectation_neighborhood) / 2.0)
        mask = (np.abs(quats @ state.prev_rotation) >= cos_half) & (p > 0)
    fallback = not mask.any() or p[mask].max() < 1e-6 * peak
    if fallback:
        q = quats[int(np.argmax(p))].copy()
    else:
        q = quaternion_weighted_average(quats[mask], p[mask])
    return Expectation(t, q, p, fallback)


# --------------------------------------------------------------------------
# one frame


@dataclass
class StepResult:
    state: FilterState
    expectation: Expectation
    failed: bool
    info: UpdateInfo


def step(
    state: FilterState,
    frame: Frame,
    cb: Codebook,
    encoder: Encoder,
    config: FilterConfig,
    rng: np.random.Generator,
    shape: Sphere | Box | None = None,
    kernel: GridKernel | None = None,
    timer=_null,
    out: np.ndarray | None = None,
) -> StepResult:
    state = propagate(state, config, rng, kernel, timer)
    if config.hybrid_fraction > 0 and frame.detection is not None and frame.detection.translation is not None:
        state = hybrid_inject(state, frame.detection.translation, config, rng)
    state, info = update(state, frame, cb, encoder, config, shape, timer, out)
    failed = info.degenerate or detect_failure(info.max_score, config)
    with timer("resample"):
        state = resample_systematic(state, rng)
    with timer("expectation"):
        exp = pose_expectation(state, config)
    state = replace(state, prev_rotation=exp.rotation)
    return StepResult(state, exp, failed, info)


@dataclass
class TrackRecord:
    frame: int
    translation: np.ndarray
    rotation: np.ndarray
    max_score: float
    failed: bool
    reinitialized: bool = False
    particles: np.ndarray | None = None

    def to_dict(self, with_particles: bool = False) -> dict:
        d = {
            "frame": self.frame,
            "translation": [float(x) for x in self.translation],
            "rotation": [float(x) for x in self.rotation],
            # no similarity exists for an initialization frame; keep the file strict JSON
            "max_similarity": float(self.max_score) if np.isfinite(self.max_score) else None,
            "failure": bool(self.failed),
            "reinitialized": bool(self.reinitialized),
        }
        if with_particles and self.particles is not None:
            d["particles"] = self.particles.tolist()
        return d


@dataclass
class Tracker:
    """Runs the filter over a frame stream, reinitializing from detections after failures."""

    cb: Codebook
    encoder: Encoder
    config: FilterConfig = field(default_factory=FilterConfig)
    seed: int = 0
    shape: Sphere | Box | None = None
    reinitialize: bool = True

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.kernel = rotation_kernel(self.config, self.cb.grid)
        self.timer = PhaseTimer()
        self.state: FilterState | None = None
        self.last: Expectation | None = None
        self.frames = 0
        self.elapsed = 0.0
        self._buffers = [None, None]

    def _first(self, frame: Frame, bbox, score: float | None = None) -> TrackRecord:
        self.state = initialize(frame, bbox, self.cb, self.encoder, self.config, shape=self.shape)
        exp = pose_expectation(self.state, self.config)
        self.state.prev_rotation = exp.rotation
        self.last = exp
        return TrackRecord(frame.index, exp.translation, exp.rotation, float("nan") if score is None else score,
                           False, True)

    def start(self, frame: Frame, bbox) -> TrackRecord:
        t0 = time.perf_counter()
        rec = self._first(frame, bbox)
        self.elapsed += time.perf_counter() - t0
        self.frames += 1
        return rec

    def track(self, frame: Frame) -> TrackRecord:
        if self.state is None:
            raise DomainError("tracker not started")
        t0 = time.perf_counter()
        # alternate output buffers so the previous posterior stays valid
        buf = self._buffers[self.frames % 2]
        if buf is None or buf.shape != (self.state.n, self.cb.grid.total):
            buf = np.empty((self.state.n, self.cb.grid.total))
            self._buffers[self.frames % 2] = buf
        res = step(self.state, frame, self.cb, self.encoder, self.config, self.rng, self.shape,
                   self.kernel, self.timer, buf)
        self.state = res.state
        self.last = res.expectation
        rec = TrackRecord(frame.index, res.expectation.translation, res.expectation.rotation,
                          res.info.max_score, res.failed, False, res.state.translations.copy())
        if res.failed and self.reinitialize and frame.detection is not None:
            try:
                self._first(frame, frame.detection.bbox)
                rec = TrackRecord(frame.index, self.last.translation, self.last.rotation,
                                  res.info.max_score, True, True, self.state.translations.copy())
            except InitializationError:
                pass
        self.elapsed += time.perf_counter() - t0
        self.frames += 1
        return rec

    def timing(self) -> dict:
        total = self.elapsed
        phases = dict(self.timer.totals)
        phases["other"] = max(0.0, total - sum(v for k, v in phases.items() if k != "other"))
        return {
            "frames": self.frames,
            "seconds": total,
            "fps": self.frames / total if total > 0 else float("nan"),
            "phases": phases,
            "fractions": {k: (v / total if total > 0 else 0.0) for k, v in phases.items()},
        }
