"""Viewpoint codebooks: one unit-norm embedding per rotation bin.

Binary layout (little endian)::

    magic      4s   b"PRBC"
    version    u32
    id_len     u16, then id_len bytes of UTF-8 object id
    grid dims  3 x u32 (azimuth, elevation, inplane)
    dim        u32  embedding dimension D
    z          f64  canonical distance in meters
    s          u32  canonical RoI size in pixels
    payload    f32[total, D], bin-major, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from rbpose.errors import CodebookBuildError, DomainError, FormatError
from rbpose.so3_grid import FULL_GRID, RotationGrid, grid_euler, grid_quaternions

MAGIC = b"PRBC"
FORMAT_VERSION = 1
DEFAULT_DIM = 128

_HEAD = struct.Struct("<4sIH")
_DIMS = struct.Struct("<IIIIdI")


@runtime_checkable
class Encoder(Protocol):
    """Maps image content to embeddings.

    ``encode_canonical`` encodes renderings of the object at the canonical
    translation for a batch of ``(M, 4)`` rotations. ``encode`` encodes the
    RoIs of one frame and returns one embedding row per RoI.
    """

    dim: int

    def encode_canonical(self, quaternions: np.ndarray) -> np.ndarray: ...

    def encode(self, frame, rois) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class Codebook:
    object_id: str
    grid: RotationGrid
    codes: np.ndarray
    z_canonical: float = 1.0
    s_canonical: int = 128

    def __post_init__(self) -> None:
        codes = np.ascontiguousarray(self.codes, dtype=np.float32)
        if codes.ndim != 2 or codes.shape[0] != self.grid.total:
            raise DomainError(
                f"codebook needs {self.grid.total} rows, got shape {codes.shape}"
            )
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def check_unit_norm(self, tol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.codes.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
        if bad.size:
            raise DomainError(f"{bad.size} codebook rows are not unit norm (first: {bad[0]})")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def build_codebook(
    encoder: Encoder,
    grid: RotationGrid = FULL_GRID,
    object_id: str = "object",
    z_canonical: float = 1.0,
    s_canonical: int = 128,
    chunk: int = 16384,
) -> Codebook:
    quats = grid_quaternions(grid)
    codes = np.empty((grid.total, encoder.dim), dtype=np.float32)
    for lo in range(0, grid.total, chunk):
        hi = min(grid.total, lo + chunk)
        try:
            block = np.asarray(encoder.encode_canonical(quats[lo:hi]), dtype=np.float64)
        except Exception as exc:
            raise CodebookBuildError(
                f"encoder failed on bins {lo}..{hi - 1}: {exc}"
            ) from exc
        norms = np.linalg.norm(block, axis=1) if block.ndim == 2 else None
        if norms is None or block.shape != (hi - lo, encoder.dim):
            raise CodebookBuildError(f"encoder returned shape {block.shape} for bins {lo}..{hi - 1}")
        bad = np.flatnonzero(~np.isfinite(norms) | (norms == 0))
        if bad.size:
            j = lo + int(bad[0])
            az, el, ip = grid_euler(grid)[j]
            raise CodebookBuildError(
                f"encoder produced a zero or non-finite code for bin {j} "
                f"(azimuth={az:g}, elevation={el:g}, inplane={ip:g})"
            )
        codes[lo:hi] = block / norms[:, None]
    return Codebook(object_id, grid, codes, float(z_canonical), int(s_canonical))


# --------------------------------------------------------------------------
# persistence


def save_codebook(cb: Codebook, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    oid = cb.object_id.encode("utf-8")
    if len(oid) > 0xFFFF:
        raise DomainError("object id too long")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(oid)))
            fh.write(oid)
            fh.write(_DIMS.pack(*cb.grid.shape, cb.dim, cb.z_canonical, cb.s_canonical))
            fh.write(cb.codes.astype("<f4", copy=False).tobytes(order="C"))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_codebook(path: str | os.PathLike) -> Codebook:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, id_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEAD.size
    if len(data) < pos + id_len + _DIMS.size:
        raise FormatError(f"{path}: truncated header")
    try:
        object_id = data[pos:pos + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: object id is not UTF-8") from exc
    pos += id_len
    n_a, n_e, n_i, dim, z, s = _DIMS.unpack_from(data, pos)
    pos += _DIMS.size
    if min(n_a, n_i, dim) < 1 or n_e < 2:
        raise FormatError(f"{path}: invalid grid or dimension in header")
    grid = RotationGrid(n_a, n_e, n_i)
    expected = grid.total * dim * 4
    if len(data) - pos != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - pos} bytes, header implies {expected}"
        )
    codes = np.frombuffer(data, dtype="<f4", count=grid.total * dim, offset=pos)
    codes = codes.reshape(grid.total, dim).astype(np.float32)
    if not np.all(np.isfinite(codes)):
        raise FormatError(f"{path}: non-finite codes")
    return Codebook(object_id, grid, codes, z, s)


def payload_size(grid: RotationGrid, dim: int) -> int:
    return grid.total * dim * 4


# --------------------------------------------------------------------------
# matching


def batch_similarity(codes: np.ndarray, cb: Codebook) -> np.ndarray:
    """Cosine similarity of ``(K, D)`` codes against every codebook row, ``(K, total)`` float32."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.shape[1] != cb.dim:
        raise DomainError(f"embedding dim {codes.shape[1]} != codebook dim {cb.dim}")
    norms = np.linalg.norm(codes, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("cannot score a zero embedding")
    q = (codes / norms).astype(np.float32)
    out = q @ cb.codes.T
    np.clip(out, -1.0, 1.0, out=out)
    return out


def similarity_scores(code: np.ndarray, cb: Codebook) -> np.ndarray:
    return batch_similarity(np.asarray(code)[None, :], cb)[0].astype(np.float64)


def scores_to_likelihoods(all_scores: np.ndarray, sigma: float) -> np.ndarray:
    """Unnormalised Gaussian density of each score, centred on the global maximum.

    ``all_scores`` is ``(K, total)``, one row per particle. The shared centre
    couples the particles: a row whose best score is below the overall best
    receives uniformly smaller likelihoods.
    """
    s = np.asarray(all_scores, dtype=np.float64)
    if s.size == 0:
        raise DomainError("no scores")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    s = np.atleast_2d(s)
    d = s.max() - s
    return np.exp(-(d * d) / (2.0 * sigma * sigma))
