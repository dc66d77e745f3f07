"""Per-hypothesis observation model.

A translation hypothesis fixes a square RoI in the image. The encoder turns
the RoI into an embedding that is matched against the codebook (colour
likelihood). With depth, the object proxy is rendered at the hypothesis and
compared with the measured depth inside the same RoI.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from rbpose.codebook import Codebook, Encoder, batch_similarity
from rbpose.errors import DomainError
from rbpose.so3_grid import quat_to_matrix

DEPTH_RASTER = 64
MIN_OVERLAP = 0.25
SENTINEL_SCORE = -1.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    px: float
    py: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise DomainError("image size must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "px", "py", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["px"]), float(d["py"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Roi:
    center_u: float
    center_v: float
    size: float

    def __post_init__(self) -> None:
        if not self.size > 0:
            raise DomainError("RoI size must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.center_u, self.center_v, self.size])

    def overlap_fraction(self, width: int, height: int) -> float:
        return float(roi_overlap(self.as_array()[None], width, height)[0])


@dataclass(frozen=True)
class Detection:
    """External per-frame detection: a 2D box and optionally a full pose."""

    bbox: tuple[float, float, float, float]  # u0, v0, u1, v1
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None

    @property
    def has_pose(self) -> bool:
        return self.rotation is not None and self.translation is not None


@dataclass
class Frame:
    """One time step of input.

    ``depth`` is a full-resolution depth image in meters with 0 marking
    invalid pixels. Synthetic frames carry their ground truth and the
    fraction of the object left visible by occluders; replayed frames carry a
    table of precomputed RoI embeddings instead.
    """

    index: int
    intrinsics: CameraIntrinsics
    depth: np.ndarray | None = None
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None
    visible_fraction: float = 1.0
    detection: Detection | None = None
    embeddings: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# projection and RoIs


def _check_depth(t: np.ndarray) -> None:
    if np.any(t[..., 2] <= 0) or not np.all(np.isfinite(t)):
        raise DomainError("translation must be finite with z > 0")


def project_translation(t: Sequence[float] | np.ndarray, c: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of one or many ``(..., 3)`` translations."""
    t = np.asarray(t, dtype=np.float64)
    _check_depth(t)
    u = c.fx * t[..., 0] / t[..., 2] + c.px
    v = c.fy * t[..., 1] / t[..., 2] + c.py
    return np.stack([u, v], axis=-1)


def backproject(u: float, v: float, z: np.ndarray, c: CameraIntrinsics) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    x = (u - c.px) * z / c.fx
    y = (v - c.py) * z / c.fy
    return np.stack([x, y, z], axis=-1)


def rois_for_translations(
    t: np.ndarray, c: CameraIntrinsics, z_canonical: float, s_canonical: float
) -> np.ndarray:
    """``(N, 3)`` array of RoIs ``(u, v, size)``; size scales as ``s * z_canonical / z``."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    uv = project_translation(t, c)
    size = s_canonical * z_canonical / t[:, 2]
    return np.column_stack([uv, size])


def roi_for_translation(
    t: Sequence[float] | np.ndarray, c: CameraIntrinsics, z_canonical: float, s_canonical: float
) -> Roi:
    r = rois_for_translations(np.asarray(t, dtype=np.float64)[None], c, z_canonical, s_canonical)[0]
    return Roi(*r)


def roi_overlap(rois: np.ndarray, width: int, height: int) -> np.ndarray:
    """Fraction of each RoI's area that lies inside a ``width x height`` image."""
    rois = np.atleast_2d(rois)
    half = rois[:, 2] / 2.0
    u0 = np.clip(rois[:, 0] - half, 0, width)
    u1 = np.clip(rois[:, 0] + half, 0, width)
    v0 = np.clip(rois[:, 1] - half, 0, height)
    v1 = np.clip(rois[:, 1] + half, 0, height)
    inter = np.maximum(u1 - u0, 0) * np.maximum(v1 - v0, 0)
    return inter / (rois[:, 2] ** 2)


# --------------------------------------------------------------------------
# colour likelihood


@contextmanager
def _null_timer(name: str):
    yield


@dataclass
class ColorScores:
    scores: np.ndarray       # (N, total) float32 cosine scores
    embeddings: np.ndarray   # (N, D); zero rows for starved hypotheses
    starved: np.ndarray      # (N,) bool
    rois: np.ndarray         # (N, 3)

    @cached_property
    def max_score(self) -> float:
        return float(self.scores.max())


def color_scores(
    frame: Frame,
    translations: np.ndarray,
    cb: Codebook,
    encoder: Encoder,
    z_canonical: float | None = None,
    s_canonical: float | None = None,
    min_overlap: float = MIN_OVERLAP,
    timer=None,
) -> ColorScores:
    """Encode every hypothesis RoI and score it against the whole codebook."""
    z = cb.z_canonical if z_canonical is None else z_canonical
    s = cb.s_canonical if s_canonical is None else s_canonical
    t = np.atleast_2d(np.asarray(translations, dtype=np.float64))
    c = frame.intrinsics
    n = t.shape[0]
    ok = np.isfinite(t).all(axis=1) & (t[:, 2] > 0)
    rois = np.zeros((n, 3))
    rois[ok] = rois_for_translations(t[ok], c, z, s)
    ok[ok] &= roi_overlap(rois[ok], c.width, c.height) >= min_overlap
    emb = np.zeros((n, cb.dim))
    timer = _null_timer if timer is None else timer
    if ok.all():
        with timer("encode"):
            emb[:] = encoder.encode(frame, rois)
        with timer("similarity"):
            scores = batch_similarity(emb, cb)
    else:
        scores = np.full((n, cb.grid.total), SENTINEL_SCORE, dtype=np.float32)
        if ok.any():
            with timer("encode"):
                emb[ok] = encoder.encode(frame, rois[ok])
            with timer("similarity"):
                scores[ok] = batch_similarity(emb[ok], cb)
    return ColorScores(scores, emb, ~ok, rois)


def rotation_likelihood(
    frame: Frame,
    t: Sequence[float] | np.ndarray,
    cb: Codebook,
    encoder: Encoder,
    min_overlap: float = MIN_OVERLAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Similarity scores and embedding for a single translation hypothesis.

    An off-image hypothesis gets the sentinel score everywhere and a zero
    embedding rather than raising.
    """
    r = color_scores(frame, np.asarray(t)[None], cb, encoder, min_overlap=min_overlap)
    return r.scores[0].astype(np.float64), r.embeddings[0]


def translation_likelihood(rotation_likelihoods: np.ndarray) -> float:
    """Sum of the unnormalised rotation likelihoods (correctly rounded)."""
    return math.fsum(np.asarray(rotation_likelihoods, dtype=np.float64).ravel())


# --------------------------------------------------------------------------
# depth


@dataclass(frozen=True)
class Sphere:
    radius: float

    def to_dict(self) -> dict:
        return {"kind": "sphere", "radius": self.radius}


@dataclass(frozen=True)
class Box:
    extents: tuple[float, float, float]  # full side lengths, object frame

    def to_dict(self) -> dict:
        return {"kind": "box", "extents": list(self.extents)}


def shape_from_dict(d: dict) -> Sphere | Box:
    if d["kind"] == "sphere":
        return Sphere(float(d["radius"]))
    if d["kind"] == "box":
        return Box(tuple(float(x) for x in d["extents"]))
    raise DomainError(f"unknown proxy shape {d['kind']!r}")


@dataclass
class DepthPatch:
    values: np.ndarray  # meters
    valid: np.ndarray   # bool

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.asarray(self.valid, dtype=bool) & (values > 0) & np.isfinite(values)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)


def roi_raster(roi: Roi | np.ndarray, n: int = DEPTH_RASTER) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of an ``n x n`` sampling raster spanning the RoI."""
    u, v, size = roi.as_array() if isinstance(roi, Roi) else np.asarray(roi, dtype=np.float64)
    off = (np.arange(n) + 0.5) * (size / n) - size / 2.0
    return np.meshgrid(u + off, v + off, indexing="xy")


def ray_depths(
    shape: Sphere | Box,
    rotation: np.ndarray,
    translation: np.ndarray,
    us: np.ndarray,
    vs: np.ndarray,
    c: CameraIntrinsics,
) -> np.ndarray:
    """Depth (camera z) of the first surface hit along each pixel ray; NaN on a miss."""
    d = np.stack([(us - c.px) / c.fx, (vs - c.py) / c.fy, np.ones_like(us, dtype=np.float64)], axis=-1)
    t = np.asarray(translation, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        if isinstance(shape, Sphere):
            a = np.einsum("...i,...i->...", d, d)
            b = -2.0 * d @ t
            cc = t @ t - shape.radius ** 2
            disc = b * b - 4.0 * a * cc
            near = (-b - np.sqrt(disc)) / (2.0 * a)
            hit = (disc >= 0) & (near > 0)
        else:
            r = quat_to_matrix(rotation)
            o = -(r.T @ t)
            dl = d @ r  # rows are R^T d
            h = np.asarray(shape.extents, dtype=np.float64) / 2.0
            dl = np.where(np.abs(dl) < 1e-300, 1e-300, dl)
            t1 = (-h - o) / dl
            t2 = (h - o) / dl
            near = np.max(np.minimum(t1, t2), axis=-1)
            far = np.min(np.maximum(t1, t2), axis=-1)
            hit = (far >= near) & (near > 0)
    return np.where(hit, near, np.nan)


def render_depth(
    pose: tuple[np.ndarray, np.ndarray],
    shape: Sphere | Box,
    c: CameraIntrinsics,
    roi: Roi | np.ndarray,
    raster: int = DEPTH_RASTER,
) -> DepthPatch:
    rotation, translation = pose
    us, vs = roi_raster(roi, raster)
    # cast through the same pixel centres that sample_depth reads
    us, vs = np.floor(us + 0.5), np.floor(vs + 0.5)
    z = ray_depths(shape, rotation, translation, us, vs, c)
    valid = np.isfinite(z)
    return DepthPatch(np.where(valid, z, 0.0), valid)


def render_depth_image(
    pose: tuple[np.ndarray, np.ndarray], shape: Sphere | Box, c: CameraIntrinsics
) -> np.ndarray:
    """Full-resolution depth image of the proxy, 0 where the ray misses."""
    us, vs = np.meshgrid(np.arange(c.width, dtype=np.float64), np.arange(c.height, dtype=np.float64))
    z = ray_depths(shape, pose[0], pose[1], us, vs, c)
    return np.where(np.isfinite(z), z, 0.0)


def sample_depth(
    depth: np.ndarray, c: CameraIntrinsics, roi: Roi | np.ndarray, raster: int = DEPTH_RASTER
) -> DepthPatch:
    """Nearest-pixel resampling of a measured depth image onto the RoI raster."""
    us, vs = roi_raster(roi, raster)
    cols = np.floor(us + 0.5).astype(np.int64)
    rows = np.floor(vs + 0.5).astype(np.int64)
    inside = (cols >= 0) & (cols < depth.shape[1]) & (rows >= 0) & (rows < depth.shape[0])
    vals = np.zeros(us.shape)
    vals[inside] = depth[rows[inside], cols[inside]]
    return DepthPatch(vals, inside & (vals > 0) & np.isfinite(vals))


def visibility_mask(rendered: DepthPatch, measured: DepthPatch, margin: float) -> tuple[np.ndarray, float]:
    """Rendered pixels not hidden behind the measurement by more than ``margin``."""
    if rendered.values.shape != measured.values.shape:
        raise DomainError("depth patches must share a raster")
    with np.errstate(invalid="ignore"):
        mask = rendered.valid & measured.valid & (rendered.values - measured.values < margin)
    n_rendered = int(rendered.valid.sum())
    v = float(mask.sum()) / n_rendered if n_rendered else 0.0
    return mask, v


def depth_discrepancy(rendered: DepthPatch, measured: DepthPatch, mask: np.ndarray, tau: float) -> float:
    """Mean clamped absolute depth error over the visible pixels; 1 if none are visible."""
    if not mask.any():
        return 1.0
    err = np.abs(measured.values[mask] - rendered.values[mask]) / tau
    return float(np.mean(np.minimum(err, 1.0)))


def depth_score(v: float | np.ndarray, delta: float | np.ndarray) -> np.ndarray | float:
    return np.asarray(v) * (1.0 - np.asarray(delta))


def depth_log_likelihoods(v: np.ndarray, delta: np.ndarray, sigma_d: float) -> np.ndarray:
    s = np.atleast_1d(np.asarray(depth_score(v, delta), dtype=np.float64))
    if s.size == 0:
        raise DomainError("no particles")
    d = s.max() - s
    return -(d * d) / (2.0 * sigma_d * sigma_d)


def depth_likelihoods(v: np.ndarray, delta: np.ndarray, sigma_d: float) -> np.ndarray:
    """Gaussian of each depth score, centred on the best score among the particles."""
    return np.exp(depth_log_likelihoods(v, delta, sigma_d))


def evaluate_depth(
    frame: Frame,
    shape: Sphere | Box,
    rotations: np.ndarray,
    translations: np.ndarray,
    rois: np.ndarray,
    margin: float,
    tau: float,
    raster: int = DEPTH_RASTER,
) -> tuple[np.ndarray, np.ndarray]:
    """Visibility ratio and discrepancy for each ``(rotation, translation, roi)``."""
    if frame.depth is None:
        raise DomainError("frame has no depth image")
    n = translations.shape[0]
    v = np.zeros(n)
    delta = np.ones(n)
    for i in range(n):
        if not translations[i, 2] > 0:
            continue
        rendered = render_depth((rotations[i], translations[i]), shape, frame.intrinsics, rois[i], raster)
        measured = sample_depth(frame.depth, frame.intrinsics, rois[i], raster)
        mask, v[i] = visibility_mask(rendered, measured, margin)
        delta[i] = depth_discrepancy(rendered, measured, mask, tau)
    return v, delta
