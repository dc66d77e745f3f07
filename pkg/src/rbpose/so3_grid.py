"""Discretized rotation space.

Rotations are parameterised by (azimuth, elevation, in-plane) angles in
degrees and composed as ``R = Rz(inplane) @ Rx(elevation) @ Ry(azimuth)``:
the object is first turned about the camera up-axis (y), then tilted about
the lateral axis (x), then spun about the viewing axis (z). All three are
extrinsic, camera-frame rotations. The reference frame is the camera
(egocentric). Gimbal lock occurs at elevation +/-90 degrees.

Quaternions are numpy arrays ordered ``(w, x, y, z)`` and are returned with
``w >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from rbpose import _kernels
from rbpose.errors import DomainError


@dataclass(frozen=True)
class EulerAngles:
    azimuth: float
    elevation: float
    inplane: float

    def __post_init__(self) -> None:
        el = float(self.elevation)
        if not (-90.0 <= el <= 90.0) or not math.isfinite(el):
            raise DomainError(f"elevation {el} outside [-90, 90]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        object.__setattr__(self, "inplane", float(self.inplane) % 360.0)
        object.__setattr__(self, "elevation", el)

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.inplane])


@dataclass(frozen=True)
class RotationGrid:
    """Regular Euler grid; elevation centers include both poles."""

    n_azimuth: int = 72
    n_elevation: int = 37
    n_inplane: int = 72

    def __post_init__(self) -> None:
        if self.n_azimuth < 1 or self.n_inplane < 1 or self.n_elevation < 2:
            raise DomainError("grid needs >=1 azimuth/inplane and >=2 elevation bins")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_azimuth, self.n_elevation, self.n_inplane)

    @property
    def total(self) -> int:
        return self.n_azimuth * self.n_elevation * self.n_inplane

    @property
    def steps(self) -> tuple[float, float, float]:
        """Bin spacing in degrees along (azimuth, elevation, inplane)."""
        return (
            360.0 / self.n_azimuth,
            180.0 / (self.n_elevation - 1),
            360.0 / self.n_inplane,
        )

    @property
    def step(self) -> float:
        return self.steps[0]


FULL_GRID = RotationGrid()
REDUCED_GRID = RotationGrid(12, 7, 12)


# --------------------------------------------------------------------------
# indexing


def grid_indices(angles: np.ndarray, grid: RotationGrid = FULL_GRID) -> np.ndarray:
    """Vectorised nearest-bin lookup for an ``(..., 3)`` array of Euler angles."""
    angles = np.asarray(angles, dtype=np.float64)
    el = angles[..., 1]
    if np.any(el < -90.0) or np.any(el > 90.0) or not np.all(np.isfinite(angles)):
        raise DomainError("elevation outside [-90, 90] or non-finite angle")
    sa, se, si = grid.steps
    ia = np.floor(np.mod(angles[..., 0], 360.0) / sa + 0.5).astype(np.int64) % grid.n_azimuth
    ie = np.clip(np.floor((el + 90.0) / se + 0.5).astype(np.int64), 0, grid.n_elevation - 1)
    ii = np.floor(np.mod(angles[..., 2], 360.0) / si + 0.5).astype(np.int64) % grid.n_inplane
    return (ia * grid.n_elevation + ie) * grid.n_inplane + ii


def grid_index(e: EulerAngles, grid: RotationGrid = FULL_GRID) -> int:
    return int(grid_indices(e.as_array(), grid))


def bin_center(index: int, grid: RotationGrid = FULL_GRID) -> EulerAngles:
    if not (0 <= int(index) < grid.total):
        raise DomainError(f"bin index {index} outside [0, {grid.total})")
    return EulerAngles(*grid_euler(grid)[int(index)])


@lru_cache(maxsize=8)
def grid_euler(grid: RotationGrid = FULL_GRID) -> np.ndarray:
    """``(total, 3)`` Euler angles of every bin center, row-major order."""
    sa, se, si = grid.steps
    az = np.arange(grid.n_azimuth) * sa
    el = -90.0 + np.arange(grid.n_elevation) * se
    ip = np.arange(grid.n_inplane) * si
    a, e, i = np.meshgrid(az, el, ip, indexing="ij")
    out = np.stack([a.ravel(), e.ravel(), i.ravel()], axis=1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def grid_quaternions(grid: RotationGrid = FULL_GRID) -> np.ndarray:
    """``(total, 4)`` unit quaternions of every bin center."""
    q = euler_to_quaternion(grid_euler(grid))
    q.setflags(write=False)
    return q


# --------------------------------------------------------------------------
# quaternion algebra


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Normalise and flip sign so that ``w >= 0``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def axis_angle_quaternion(axis: Sequence[float], angle_deg: float | np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = np.radians(np.asarray(angle_deg, dtype=np.float64)) / 2.0
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion via the top eigenvector of Bar-Itzhack's K."""
    r = np.asarray(m, dtype=np.float64)
    k = np.empty(r.shape[:-2] + (4, 4))
    k[..., 0, 0] = r[..., 0, 0] - r[..., 1, 1] - r[..., 2, 2]
    k[..., 1, 1] = r[..., 1, 1] - r[..., 0, 0] - r[..., 2, 2]
    k[..., 2, 2] = r[..., 2, 2] - r[..., 0, 0] - r[..., 1, 1]
    k[..., 3, 3] = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    k[..., 0, 1] = k[..., 1, 0] = r[..., 1, 0] + r[..., 0, 1]
    k[..., 0, 2] = k[..., 2, 0] = r[..., 2, 0] + r[..., 0, 2]
    k[..., 1, 2] = k[..., 2, 1] = r[..., 2, 1] + r[..., 1, 2]
    k[..., 0, 3] = k[..., 3, 0] = r[..., 2, 1] - r[..., 1, 2]
    k[..., 1, 3] = k[..., 3, 1] = r[..., 0, 2] - r[..., 2, 0]
    k[..., 2, 3] = k[..., 3, 2] = r[..., 1, 0] - r[..., 0, 1]
    _, vecs = np.linalg.eigh(k / 3.0)
    top = vecs[..., :, -1]
    return quat_canonical(top[..., [3, 0, 1, 2]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=np.float64))


# --------------------------------------------------------------------------
# Euler <-> quaternion


def euler_to_quaternion(e: EulerAngles | np.ndarray) -> np.ndarray:
    """Quaternion of ``Rz(inplane) Rx(elevation) Ry(azimuth)``; accepts ``(..., 3)`` arrays."""
    angles = e.as_array() if isinstance(e, EulerAngles) else np.asarray(e, dtype=np.float64)
    half = np.radians(angles) / 2.0
    ca, sa = np.cos(half[..., 0]), np.sin(half[..., 0])
    ce, se = np.cos(half[..., 1]), np.sin(half[..., 1])
    ci, si = np.cos(half[..., 2]), np.sin(half[..., 2])
    # qz(ip) * qx(el) * qy(az), expanded
    w = ci * ce * ca - si * se * sa
    x = ci * se * ca - si * ce * sa
    y = ci * ce * sa + si * se * ca
    z = si * ce * ca + ci * se * sa
    return quat_canonical(np.stack([w, x, y, z], axis=-1))


def quaternion_to_euler(q: np.ndarray) -> EulerAngles:
    return EulerAngles(*quaternions_to_euler(q))


def quaternions_to_euler(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_quaternion` returning ``(..., 3)`` degrees.

    At gimbal lock the whole azimuth/in-plane ambiguity is assigned to the
    in-plane angle (azimuth = 0).
    """
    r = quat_to_matrix(q)
    cos_el = np.hypot(r[..., 2, 0], r[..., 2, 2])
    el = np.degrees(np.arctan2(r[..., 2, 1], cos_el))
    locked = cos_el < 1e-12
    az = np.degrees(np.arctan2(-r[..., 2, 0], r[..., 2, 2]))
    ip = np.degrees(np.arctan2(-r[..., 0, 1], r[..., 1, 1]))
    sign = np.sign(r[..., 2, 1])
    ip_locked = np.degrees(np.arctan2(sign * r[..., 0, 2], r[..., 0, 0]))
    az = np.where(locked, 0.0, az)
    ip = np.where(locked, ip_locked, ip)
    return np.stack([np.mod(az, 360.0), el, np.mod(ip, 360.0)], axis=-1)


def geodesic_distance(q1: np.ndarray, q2: np.ndarray) -> np.ndarray | float:
    """Rotation angle between two (batches of) unit quaternions, degrees in [0, 180]."""
    d = np.abs(np.sum(np.asarray(q1, dtype=np.float64) * np.asarray(q2, dtype=np.float64), axis=-1))
    out = np.degrees(2.0 * np.arccos(np.clip(d, 0.0, 1.0)))
    return float(out) if np.ndim(out) == 0 else out


def quaternion_weighted_average(qs: np.ndarray, ws: np.ndarray) -> np.ndarray:
    """Maximiser of ``sum_i w_i (q . q_i)^2`` over unit quaternions.

    The result is the principal eigenvector of ``sum_i w_i q_i q_i^T``, which
    is insensitive to the sign of each ``q_i``.
    """
    qs = np.atleast_2d(np.asarray(qs, dtype=np.float64))
    ws = np.asarray(ws, dtype=np.float64).ravel()
    if qs.shape[0] != ws.shape[0]:
        raise DomainError("one weight per quaternion required")
    if np.any(ws < 0) or not np.all(np.isfinite(ws)):
        raise DomainError("weights must be finite and non-negative")
    if not np.any(ws > 0):
        raise DomainError("at least one weight must be positive")
    m = (qs * ws[:, None]).T @ qs
    _, vecs = np.linalg.eigh(m)
    return quat_canonical(vecs[:, -1])


# --------------------------------------------------------------------------
# distributions and kernels


class RotationDistribution:
    """Dense non-negative array over the bins of a grid, shaped ``grid.shape``."""

    __slots__ = ("values", "grid")

    def __init__(self, values: np.ndarray, grid: RotationGrid = FULL_GRID) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(grid.shape)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise DomainError("distribution entries must be finite and non-negative")
        self.values = values
        self.grid = grid

    @classmethod
    def uniform(cls, grid: RotationGrid = FULL_GRID) -> RotationDistribution:
        return cls(np.full(grid.shape, 1.0 / grid.total), grid)

    @classmethod
    def delta(cls, index: int, grid: RotationGrid = FULL_GRID) -> RotationDistribution:
        v = np.zeros(grid.total)
        v[index] = 1.0
        return cls(v, grid)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def total(self) -> float:
        return float(self.values.sum())

    def normalized(self) -> RotationDistribution:
        s = self.total()
        if s <= 0:
            raise DomainError("cannot normalise a distribution with zero mass")
        return RotationDistribution(self.values / s, self.grid)

    def argmax(self) -> int:
        return int(np.argmax(self.flat))


@dataclass(frozen=True, eq=False)
class GridKernel:
    """Separable kernel; each axis holds an odd-length, unit-sum weight vector."""

    azimuth: np.ndarray
    elevation: np.ndarray
    inplane: np.ndarray

    def __post_init__(self) -> None:
        for name in ("azimuth", "elevation", "inplane"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.ndim != 1 or w.size % 2 != 1 or np.any(w < 0):
                raise DomainError(f"{name} weights must be an odd-length non-negative vector")
            object.__setattr__(self, name, w / w.sum())

    @classmethod
    def delta(cls) -> GridKernel:
        one = np.ones(1)
        return cls(one, one, one)

    @property
    def half_widths(self) -> tuple[int, int, int]:
        return tuple((w.size - 1) // 2 for w in (self.azimuth, self.elevation, self.inplane))

    @property
    def weights(self) -> np.ndarray:
        return np.einsum("a,e,i->aei", self.azimuth, self.elevation, self.inplane)


def _gaussian_1d(sigma: float, step: float, truncation: float) -> np.ndarray:
    half = int(math.ceil(truncation * sigma / step))
    offsets = np.arange(-half, half + 1) * step
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    # tails that underflow carry no mass; drop them so sigma -> 0 gives a delta
    while w.size > 1 and w[0] == 0.0:
        w = w[1:-1]
    return w / w.sum()


def gaussian_kernel(
    sigma_deg: float | Sequence[float],
    truncation: float = 3.0,
    grid: RotationGrid = FULL_GRID,
) -> GridKernel:
    sig = np.broadcast_to(np.asarray(sigma_deg, dtype=np.float64), (3,))
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise DomainError("kernel sigma must be positive on every axis")
    if truncation < 1:
        raise DomainError("truncation must be >= 1 sigma")
    parts = [_gaussian_1d(s, st, truncation) for s, st in zip(sig, grid.steps)]
    return GridKernel(*parts)


def _check_kernel(kernel: GridKernel, grid: RotationGrid) -> None:
    for h, n, name in zip(kernel.half_widths, grid.shape, ("azimuth", "elevation", "inplane")):
        if h >= n:
            raise DomainError(f"kernel half-width {h} >= {name} axis length {n}")


def convolve_rows(
    values: np.ndarray,
    kernel: GridKernel,
    grid: RotationGrid = FULL_GRID,
    rows: np.ndarray | None = None,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Convolve selected rows of a ``(M, total)`` stack; each row keeps its mass.

    Azimuth and in-plane wrap; mass pushed past the elevation poles is dropped
    and the row is rescaled to its input total.
    """
    _check_kernel(kernel, grid)
    values = np.ascontiguousarray(values, dtype=np.float64).reshape((-1,) + grid.shape)
    rows = np.arange(values.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if out is None:
        out = np.empty((rows.size,) + grid.shape)
    else:
        out = out.reshape((rows.size,) + grid.shape)
    if kernel.half_widths == (0, 0, 0):
        out[...] = values[rows]
        return out.reshape(rows.size, grid.total)
    _kernels.convolve_rows(values, rows, kernel.azimuth, kernel.elevation, kernel.inplane, out)
    return out.reshape(rows.size, grid.total)


def convolve_distribution(d: RotationDistribution, kernel: GridKernel) -> RotationDistribution:
    out = convolve_rows(d.values[None], kernel, d.grid)
    return RotationDistribution(out[0], d.grid)
