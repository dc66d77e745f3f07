"""Deterministic synthetic stand-in for rendering plus a learned encoder.

Codes are random Fourier features of the rotation matrix of a symmetry-
canonicalised rotation, so symmetric poses share a code exactly and nearby
poses get similar codes. Observed codes degrade with RoI misalignment the
way a reconstruction network's do: the true code is blended with an
orthogonal residual by an attenuation factor.

Symmetry axes act on the grid's own Euler axes:

* ``azimuth`` - object-frame y axis, ``R -> R @ Ry(theta)`` (shifts azimuth)
* ``inplane`` - camera viewing axis, ``R -> Rz(theta) @ R`` (shifts in-plane)

Mirror symmetries take an axis ``x``, ``y`` or ``z`` and pair ``R`` with
``M R M`` where ``M`` flips that axis; ``x`` maps (az, el, ip) to
(-az, el, -ip).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from rbpose.errors import DomainError, FormatError, SequenceError
from rbpose.observation import (
    Box,
    CameraIntrinsics,
    Detection,
    Frame,
    Sphere,
    project_translation,
    render_depth_image,
    shape_from_dict,
)
from rbpose.so3_grid import (
    axis_angle_quaternion,
    quat_canonical,
    quat_conjugate,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
)

_ROUND = 10
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])
_MIRROR_SIGNS = {
    "x": np.array([1.0, 1.0, -1.0, -1.0]),
    "y": np.array([1.0, -1.0, 1.0, -1.0]),
    "z": np.array([1.0, -1.0, -1.0, 1.0]),
}

DEFAULT_INTRINSICS = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@dataclass(frozen=True)
class SymmetrySpec:
    kind: str = "none"  # none | cyclic | mirror | revolution
    k: int = 0
    axis: str = "azimuth"

    def __post_init__(self) -> None:
        if self.kind not in ("none", "cyclic", "mirror", "revolution"):
            raise DomainError(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "cyclic" and self.k < 2:
            raise DomainError("cyclic symmetry needs k >= 2")
        if self.kind in ("cyclic", "revolution") and self.axis not in ("azimuth", "inplane"):
            raise DomainError("cyclic/revolution axis must be 'azimuth' or 'inplane'")
        if self.kind == "mirror" and self.axis not in _MIRROR_SIGNS:
            raise DomainError("mirror axis must be 'x', 'y' or 'z'")


@dataclass(frozen=True)
class SyntheticObject:
    object_id: str = "object"
    symmetry: SymmetrySpec = SymmetrySpec()
    code_seed: int = 0
    dim: int = 128
    shape: Sphere | Box = Box((0.12, 0.16, 0.06))
    n_model_points: int = 512
    bandwidth: float = 2.0

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "symmetry": asdict(self.symmetry),
            "code_seed": self.code_seed,
            "dim": self.dim,
            "shape": self.shape.to_dict(),
            "n_model_points": self.n_model_points,
            "bandwidth": self.bandwidth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticObject:
        return cls(
            object_id=str(d.get("object_id", "object")),
            symmetry=SymmetrySpec(**d.get("symmetry", {})),
            code_seed=int(d.get("code_seed", 0)),
            dim=int(d.get("dim", 128)),
            shape=shape_from_dict(d["shape"]) if "shape" in d else Box((0.12, 0.16, 0.06)),
            n_model_points=int(d.get("n_model_points", 512)),
            bandwidth=float(d.get("bandwidth", 2.0)),
        )


@dataclass(frozen=True)
class Occluder:
    """Vertical bar in front of the object hiding ``fraction`` of its silhouette."""

    fraction: float = 0.3
    offset: float = 0.1  # meters in front of the nearest object point
    side: str = "left"
    roi_bias: float = 0.5  # fraction of the visible-part offset the encoder locks onto


@dataclass(frozen=True)
class NoiseSpec:
    code_noise: float = 0.0
    depth_noise: float = 0.0
    sigma_uv: float = 10.0
    sigma_logscale: float = 0.1
    occluder: Occluder | None = None

    def __post_init__(self) -> None:
        if min(self.code_noise, self.depth_noise) < 0:
            raise DomainError("noise levels must be non-negative")
        if not (self.sigma_uv > 0 and self.sigma_logscale > 0):
            raise DomainError("attenuation widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSpec:
        d = dict(d)
        occ = d.pop("occluder", None)
        return cls(occluder=Occluder(**occ) if occ else None, **d)


# --------------------------------------------------------------------------
# codes


def _swing(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Shortest-arc quaternions taking unit vector(s) ``src`` to ``dst``."""
    dot = np.sum(src * dst, axis=-1)
    cross = np.cross(src, dst)
    q = np.concatenate([(1.0 + dot)[..., None], cross], axis=-1)
    anti = (1.0 + dot) < 1e-12
    if np.any(anti):
        # any half-turn about an axis orthogonal to src works; pick a fixed one
        ortho = np.cross(src, np.array([1.0, 0.0, 0.0]))
        small = np.linalg.norm(ortho, axis=-1) < 1e-6
        ortho = np.where(small[..., None], np.cross(src, np.array([0.0, 0.0, 1.0])), ortho)
        ortho /= np.linalg.norm(ortho, axis=-1, keepdims=True)
        q = np.where(anti[..., None], np.concatenate([np.zeros(dot.shape + (1,)), ortho], axis=-1), q)
    return quat_canonical(q)


def _lex_pick(cands: np.ndarray, largest: bool) -> np.ndarray:
    """Choose one of ``(..., m, 4)`` candidates per row by rounded lexicographic order."""
    r = np.round(quat_canonical(cands), _ROUND) + 0.0
    flat = r.reshape(-1, r.shape[-2], 4)
    out = np.empty((flat.shape[0], 4))
    for n, rows in enumerate(flat):
        keys = [tuple(x) for x in rows]
        best = max(range(len(keys)), key=keys.__getitem__) if largest else min(
            range(len(keys)), key=keys.__getitem__
        )
        out[n] = rows[best]
    return out.reshape(r.shape[:-2] + (4,))


def canonicalize(sym: SymmetrySpec, q: np.ndarray) -> np.ndarray:
    """Map rotations to a fixed representative of their symmetry orbit."""
    q = quat_canonical(np.asarray(q, dtype=np.float64))
    if sym.kind == "none":
        return np.round(q, _ROUND) + 0.0
    if sym.kind == "cyclic":
        axis = _Y if sym.axis == "azimuth" else _Z
        steps = axis_angle_quaternion(axis, np.arange(sym.k) * 360.0 / sym.k)
        if sym.axis == "azimuth":
            cands = quat_multiply(q[..., None, :], steps)
        else:
            cands = quat_multiply(steps, q[..., None, :])
        # representative closest to the identity; ties broken lexicographically
        return _lex_pick(cands, largest=True)
    if sym.kind == "mirror":
        cands = np.stack([q, q * _MIRROR_SIGNS[sym.axis]], axis=-2)
        return _lex_pick(cands, largest=False)
    # revolution
    if sym.axis == "azimuth":
        rep = _swing(np.broadcast_to(_Y, q.shape[:-1] + (3,)), quat_rotate(q, _Y))
    else:
        u = quat_rotate(quat_conjugate(q), _Z)
        rep = _swing(u, np.broadcast_to(_Z, u.shape))
    return np.round(rep, _ROUND) + 0.0


@lru_cache(maxsize=32)
def _fourier_basis(seed: int, dim: int, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x5EED])
    w = rng.normal(0.0, bandwidth, size=(9, dim))
    b = rng.uniform(0.0, 2.0 * np.pi, size=dim)
    w.setflags(write=False)
    b.setflags(write=False)
    return w, b


def synth_encode(obj: SyntheticObject, rotation: np.ndarray) -> np.ndarray:
    """Unit-norm code(s) for ``(..., 4)`` rotations."""
    rep = canonicalize(obj.symmetry, rotation)
    feats = quat_to_matrix(rep).reshape(rep.shape[:-1] + (9,))
    w, b = _fourier_basis(obj.code_seed, obj.dim, obj.bandwidth)
    codes = np.cos(feats @ w + b)
    return codes / np.linalg.norm(codes, axis=-1, keepdims=True)


def attenuation(
    roi: np.ndarray, roi_true: np.ndarray, noise: NoiseSpec
) -> np.ndarray:
    """Signal fraction kept by an encoder fed a misaligned RoI, in (0, 1]."""
    roi = np.atleast_2d(roi)
    du = roi[:, 0] - roi_true[0]
    dv = roi[:, 1] - roi_true[1]
    ls = np.log(roi[:, 2] / roi_true[2])
    return np.exp(-(du * du + dv * dv) / (2 * noise.sigma_uv ** 2) - ls * ls / (2 * noise.sigma_logscale ** 2))


def _frame_noise(seed: int, index: int, dim: int, code: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, index, 1])
    n = rng.standard_normal(dim)
    g = rng.standard_normal(dim)
    if code is not None:
        n -= (n @ code) * code
    return n / np.linalg.norm(n), g


def observe(
    obj: SyntheticObject,
    frame: Frame,
    rois: np.ndarray,
    noise: NoiseSpec,
    seed: int,
    z_canonical: float = 1.0,
    s_canonical: float = 128.0,
) -> np.ndarray:
    """Observed embeddings for the ``(K, 3)`` RoIs of one synthetic frame.

    ``e = normalize(a c + sqrt(1 - a^2) n + code_noise g)`` where ``c`` is the
    true code, ``a`` the attenuation scaled by the visible fraction, ``n`` a
    per-frame unit residual orthogonal to ``c`` and ``g`` per-frame Gaussian
    noise. Both ``n`` and ``g`` are drawn from ``(seed, frame.index)``.
    Under occlusion the reference RoI is moved by ``frame.meta["roi_shift"]``.
    """
    rois = np.atleast_2d(np.asarray(rois, dtype=np.float64))
    present = frame.rotation is not None and frame.visible_fraction > 0
    code = synth_encode(obj, frame.rotation) if present else None
    n, g = _frame_noise(seed, frame.index, obj.dim, code)
    if not present:
        e = np.broadcast_to(n + noise.code_noise * g, (rois.shape[0], obj.dim))
        return e / np.linalg.norm(e, axis=1, keepdims=True)
    t = np.asarray(frame.translation, dtype=np.float64)
    uv = project_translation(t, frame.intrinsics)
    roi_true = np.array([uv[0], uv[1], s_canonical * z_canonical / t[2]])
    shift = frame.meta.get("roi_shift")
    if shift is not None:
        roi_true = roi_true + np.array([shift[0], shift[1], 0.0])
        roi_true[2] *= math.exp(shift[2])
    a = attenuation(rois, roi_true, noise) * float(frame.visible_fraction)
    e = a[:, None] * code + np.sqrt(np.clip(1.0 - a * a, 0.0, 1.0))[:, None] * n + noise.code_noise * g
    return e / np.linalg.norm(e, axis=1, keepdims=True)


class SyntheticEncoder:
    """Encoder protocol implementation backed by :func:`synth_encode`/:func:`observe`."""

    def __init__(
        self,
        obj: SyntheticObject,
        noise: NoiseSpec = NoiseSpec(),
        seed: int = 0,
        z_canonical: float = 1.0,
        s_canonical: float = 128.0,
    ) -> None:
        self.obj = obj
        self.noise = noise
        self.seed = seed
        self.z_canonical = z_canonical
        self.s_canonical = s_canonical
        self.dim = obj.dim

    def encode_canonical(self, quaternions: np.ndarray) -> np.ndarray:
        return synth_encode(self.obj, quaternions)

    def encode(self, frame: Frame, rois: np.ndarray) -> np.ndarray:
        return observe(self.obj, frame, rois, self.noise, self.seed, self.z_canonical, self.s_canonical)


class ReplayEncoder:
    """Serves precomputed embeddings stored per frame as rows ``[u, v, size, code...]``.

    Each requested RoI gets the code of the nearest tabulated RoI, with
    distance measured in RoI-size units and log scale.
    """

    def __init__(self, dim: int, canonical_codes: np.ndarray | None = None) -> None:
        self.dim = dim
        self._canonical = canonical_codes

    def encode_canonical(self, quaternions: np.ndarray) -> np.ndarray:
        if self._canonical is None:
            raise DomainError("replay encoder has no canonical codes")
        return self._canonical[: len(quaternions)]

    def encode(self, frame: Frame, rois: np.ndarray) -> np.ndarray:
        table = frame.embeddings
        if table is None or table.shape[1] != self.dim + 3:
            raise DomainError(f"frame {frame.index} has no embedding table of dim {self.dim}")
        rois = np.atleast_2d(rois)
        du = (rois[:, None, 0] - table[None, :, 0]) / rois[:, None, 2]
        dv = (rois[:, None, 1] - table[None, :, 1]) / rois[:, None, 2]
        ds = np.log(rois[:, None, 2] / table[None, :, 2])
        nearest = np.argmin(du * du + dv * dv + ds * ds, axis=1)
        return table[nearest, 3:]


# --------------------------------------------------------------------------
# geometry helpers


def model_points(obj: SyntheticObject, n: int | None = None) -> np.ndarray:
    """Seeded surface samples of the proxy shape, object frame."""
    n = obj.n_model_points if n is None else n
    rng = np.random.default_rng([obj.code_seed, 0xADD])
    if isinstance(obj.shape, Sphere):
        p = rng.standard_normal((n, 3))
        return obj.shape.radius * p / np.linalg.norm(p, axis=1, keepdims=True)
    h = np.asarray(obj.shape.extents) / 2.0
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    p = rng.uniform(-h, h, size=(n, 3))
    sign = rng.choice([-1.0, 1.0], size=n)
    p[np.arange(n), face_axis] = sign * h[face_axis]
    return p


# --------------------------------------------------------------------------
# trajectories and sequences


@dataclass
class Trajectory:
    """Ground-truth motion.

    ``static`` holds the start pose. ``linear`` adds ``velocity`` (m/frame)
    and ``angular_velocity`` (deg/frame rotation vector, camera frame) each
    frame. ``waypoints`` interpolates ``(frame, rotation, translation)``
    keys with Catmull-Rom translation and slerp rotation.
    """

    kind: str = "static"
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 1.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)
    waypoints: list = field(default_factory=list)

    def pose(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        q0 = quat_canonical(np.asarray(self.rotation, dtype=np.float64))
        t0 = np.asarray(self.translation, dtype=np.float64)
        if self.kind == "static":
            return q0, t0.copy()
        if self.kind == "linear":
            t = t0 + k * np.asarray(self.velocity, dtype=np.float64)
            w = np.asarray(self.angular_velocity, dtype=np.float64) * k
            ang = np.linalg.norm(w)
            if ang == 0:
                return q0, t
            return quat_canonical(quat_multiply(axis_angle_quaternion(w / ang, ang), q0)), t
        if self.kind == "waypoints":
            return _interp_waypoints(self.waypoints, k)
        raise DomainError(f"unknown trajectory kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    d = float(q0 @ q1)
    if d < 0:
        q1, d = -q1, -d
    if d > 1 - 1e-12:
        return quat_canonical(q0 + s * (q1 - q0))
    th = np.arccos(d)
    return quat_canonical((np.sin((1 - s) * th) * q0 + np.sin(s * th) * q1) / np.sin(th))


def _interp_waypoints(wps: list, k: int) -> tuple[np.ndarray, np.ndarray]:
    if not wps:
        raise DomainError("waypoint trajectory needs at least one waypoint")
    frames = [int(w["frame"]) for w in wps]
    qs = [quat_canonical(np.asarray(w["rotation"], dtype=np.float64)) for w in wps]
    ts = [np.asarray(w["translation"], dtype=np.float64) for w in wps]
    if k <= frames[0]:
        return qs[0], ts[0].copy()
    if k >= frames[-1]:
        return qs[-1], ts[-1].copy()
    i = int(np.searchsorted(frames, k, side="right")) - 1
    s = (k - frames[i]) / (frames[i + 1] - frames[i])
    p0 = ts[max(i - 1, 0)]
    p1, p2 = ts[i], ts[i + 1]
    p3 = ts[min(i + 2, len(ts) - 1)]
    t = 0.5 * (
        2 * p1 + (-p0 + p2) * s + (2 * p0 - 5 * p1 + 4 * p2 - p3) * s * s + (-p0 + 3 * p1 - 3 * p2 + p3) * s ** 3
    )
    return _slerp(qs[i], qs[i + 1], s), t


@dataclass
class DetectionSpec:
    """Simulated external detector: noisy pose plus the silhouette box."""

    translation_noise: float = 0.005
    rotation_noise_deg: float = 3.0
    every: int = 1


@dataclass
class Sequence:
    obj: SyntheticObject
    intrinsics: CameraIntrinsics
    noise: NoiseSpec
    seed: int
    frames: list[Frame]

    def encoder(self, z_canonical: float = 1.0, s_canonical: float = 128.0) -> SyntheticEncoder:
        return SyntheticEncoder(self.obj, self.noise, self.seed, z_canonical, s_canonical)

    @property
    def has_depth(self) -> bool:
        return all(f.depth is not None for f in self.frames)


def _occlude(depth: np.ndarray, occ: Occluder) -> tuple[np.ndarray, float, np.ndarray]:
    """Apply the occluder; returns the new depth, visible fraction and RoI shift.

    The shift ``(du, dv, log_scale)`` moves the encoder's best-matching RoI
    ``roi_bias`` of the way from the full silhouette's box centre to the
    centre of its visible part, and shrinks it the same fraction of the way
    (in log scale) towards ``sqrt(visible fraction)`` of the full size. Colour
    evidence alone therefore places an occluded object off-centre and too far
    away.
    """
    sil = depth > 0
    total = int(sil.sum())
    if total == 0 or occ.fraction <= 0:
        return depth, 1.0, np.zeros(3)
    cols = sil.sum(axis=0)
    cum = np.cumsum(cols if occ.side == "left" else cols[::-1])
    n_cols = int(np.searchsorted(cum, occ.fraction * total, side="left")) + 1
    band = np.zeros(depth.shape[1], dtype=bool)
    if occ.side == "left":
        band[:n_cols] = True
    else:
        band[depth.shape[1] - n_cols:] = True
    plane = depth[sil].min() - occ.offset
    out = depth.copy()
    out[:, band] = np.where((out[:, band] == 0) | (out[:, band] > plane), plane, out[:, band])
    hidden = sil & band[None, :]
    seen = sil & ~hidden
    if not seen.any():
        return out, 0.0, np.zeros(3)
    full_box = _box(sil)
    seen_box = _box(seen)
    visible = 1.0 - int(hidden.sum()) / total
    shift = occ.roi_bias * np.array([
        (seen_box[0] + seen_box[2] - full_box[0] - full_box[2]) / 2.0,
        (seen_box[1] + seen_box[3] - full_box[1] - full_box[3]) / 2.0,
        0.5 * np.log(visible),
    ])
    return out, visible, shift


def _box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows, cols = np.nonzero(mask)
    return float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)


def _quantize_mm(depth: np.ndarray) -> np.ndarray:
    mm = np.clip(np.round(depth * 1000.0), 0, 65535)
    return mm / 1000.0


def generate_sequence(
    obj: SyntheticObject,
    trajectory: Trajectory,
    n_frames: int,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    noise: NoiseSpec = NoiseSpec(),
    seed: int = 0,
    with_depth: bool = False,
    absent: tuple[int, int] | None = None,
    detections: DetectionSpec | None = None,
    background_depth: float | None = None,
) -> Sequence:
    """Render ground truth, depth and detections for ``n_frames`` frames.

    ``absent = (start, stop)`` removes the object from frames in that
    half-open range.
    """
    frames = []
    for k in range(n_frames):
        q, t = trajectory.pose(k)
        if t[2] <= 0:
            raise SequenceError(f"frame {k}: object behind the camera (z={t[2]:.3f})")
        u, v = project_translation(t, intrinsics)
        if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
            raise SequenceError(f"frame {k}: object center leaves the image at ({u:.1f}, {v:.1f})")
        present = absent is None or not (absent[0] <= k < absent[1])
        visible = 1.0 if present else 0.0
        depth = None
        sil_depth = None
        shift = np.zeros(3)
        if with_depth or detections is not None or (present and noise.occluder is not None):
            sil_depth = render_depth_image((q, t), obj.shape, intrinsics) if present else np.zeros(
                (intrinsics.height, intrinsics.width)
            )
        if with_depth:
            depth = sil_depth.copy()
            if present and noise.occluder is not None:
                depth, visible, shift = _occlude(depth, noise.occluder)
            if background_depth is not None:
                depth = np.where(depth > 0, depth, background_depth)
            if noise.depth_noise > 0:
                rng = np.random.default_rng([seed, k, 2])
                depth = np.where(depth > 0, depth + rng.normal(0.0, noise.depth_noise, depth.shape), 0.0)
            depth = _quantize_mm(np.maximum(depth, 0.0))
        elif present and noise.occluder is not None:
            _, visible, shift = _occlude(sil_depth, noise.occluder)
        det = None
        if detections is not None and present and k % max(detections.every, 1) == 0:
            det = _detect(sil_depth, q, t, detections, np.random.default_rng([seed, k, 3]))
        frames.append(
            Frame(index=k, intrinsics=intrinsics, depth=depth, rotation=q, translation=t,
                  visible_fraction=visible, detection=det,
                  meta={"roi_shift": shift.tolist()} if np.any(shift) else {})
        )
    return Sequence(obj, intrinsics, noise, seed, frames)


def _detect(sil_depth: np.ndarray, q: np.ndarray, t: np.ndarray, spec: DetectionSpec, rng) -> Detection | None:
    rows, cols = np.nonzero(sil_depth > 0)
    if rows.size == 0:
        return None
    bbox = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
    dq = axis_angle_quaternion(rng.standard_normal(3), rng.normal(0.0, spec.rotation_noise_deg))
    qd = quat_canonical(quat_multiply(dq, q))
    td = t + rng.normal(0.0, spec.translation_noise, 3)
    return Detection(bbox, qd, td)


# --------------------------------------------------------------------------
# depth raster files

DEPTH_MAGIC = b"PRBD"
_DEPTH_HEAD = struct.Struct("<4sIIHH")


def write_depth_raster(path: str | os.PathLike, depth_m: np.ndarray) -> None:
    h, w = depth_m.shape
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEAD.pack(DEPTH_MAGIC, w, h, 1000, 0))
        fh.write(mm.tobytes(order="C"))


def read_depth_raster(path: str | os.PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read depth raster {path}: {exc.strerror}") from exc
    if len(data) < _DEPTH_HEAD.size:
        raise FormatError(f"{path}: truncated depth header")
    magic, w, h, scale, _ = _DEPTH_HEAD.unpack_from(data, 0)
    if magic != DEPTH_MAGIC or scale == 0:
        raise FormatError(f"{path}: not a depth raster")
    if len(data) != _DEPTH_HEAD.size + 2 * w * h:
        raise FormatError(f"{path}: payload size does not match {w}x{h}")
    mm = np.frombuffer(data, dtype="<u2", offset=_DEPTH_HEAD.size).reshape(h, w)
    return mm.astype(np.float64) / scale


# --------------------------------------------------------------------------
# manifest

MANIFEST_FORMAT = "rbpose-sequence"
MANIFEST_VERSION = 1


def _pose_dict(q, t) -> dict:
    return {"rotation": [float(x) for x in q], "translation": [float(x) for x in t]}


def save_sequence(seq: Sequence, out_dir: str | os.PathLike, name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for f in seq.frames:
        rec = {"index": f.index, "visible_fraction": f.visible_fraction, **_pose_dict(f.rotation, f.translation)}
        if f.depth is not None:
            (out / "depth").mkdir(exist_ok=True)
            rel = f"depth/{f.index:06d}.prbd"
            write_depth_raster(out / rel, f.depth)
            rec["depth"] = rel
        if f.detection is not None:
            d = f.detection
            det = {"bbox": list(d.bbox)}
            if d.has_pose:
                det.update(_pose_dict(d.rotation, d.translation))
            rec["detection"] = det
        if f.meta:
            rec["meta"] = f.meta
        if f.embeddings is not None:
            (out / "embeddings").mkdir(exist_ok=True)
            rel = f"embeddings/{f.index:06d}.npy"
            np.save(out / rel, f.embeddings)
            rec["embeddings"] = rel
        records.append(rec)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seq.seed,
        "object": seq.obj.to_dict(),
        "noise": seq.noise.to_dict(),
        "intrinsics": seq.intrinsics.to_dict(),
        "frames": records,
    }
    path = out / name
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_sequence(path: str | os.PathLike) -> Sequence:
    """Read a manifest, given its path or the directory holding ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        m = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse manifest: {exc}") from exc
    try:
        if m.get("format") != MANIFEST_FORMAT or m.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: not a version {MANIFEST_VERSION} sequence manifest")
        obj = SyntheticObject.from_dict(m["object"])
        noise = NoiseSpec.from_dict(m.get("noise", {}))
        intr = CameraIntrinsics.from_dict(m["intrinsics"])
        frames = []
        last = -1
        for rec in m["frames"]:
            idx = int(rec["index"])
            if idx <= last:
                raise FormatError(f"{path}: frame indices must increase (got {idx} after {last})")
            last = idx
            depth = read_depth_raster(path.parent / rec["depth"]) if rec.get("depth") else None
            det = None
            if rec.get("detection"):
                d = rec["detection"]
                det = Detection(
                    tuple(float(x) for x in d["bbox"]),
                    np.asarray(d["rotation"], dtype=np.float64) if "rotation" in d else None,
                    np.asarray(d["translation"], dtype=np.float64) if "translation" in d else None,
                )
            emb = None
            if rec.get("embeddings"):
                ep = path.parent / rec["embeddings"]
                if not ep.exists():
                    raise FormatError(f"missing embedding table {ep}")
                emb = np.load(ep)
            frames.append(
                Frame(
                    index=idx,
                    intrinsics=intr,
                    depth=depth,
                    rotation=np.asarray(rec["rotation"], dtype=np.float64),
                    translation=np.asarray(rec["translation"], dtype=np.float64),
                    visible_fraction=float(rec.get("visible_fraction", 1.0)),
                    detection=det,
                    embeddings=emb,
                    meta=dict(rec.get("meta", {})),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    return Sequence(obj, intr, noise, int(m.get("seed", 0)), frames)


def replace_noise(seq: Sequence, **changes) -> Sequence:
    return replace(seq, noise=replace(seq.noise, **changes))
