"""Compiled inner loops for the per-frame hot path.

Everything here operates on raw arrays; validation lives in the callers.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

with warnings.catch_warnings():
    # numba probes optional threading layers on import and warns when absent
    warnings.simplefilter("ignore")
    import numba as nb
    from numba import prange

_CACHE = os.environ.get("RBPOSE_NO_JIT_CACHE") is None
# results below the smallest normal double are flushed to zero: arithmetic on
# subnormals is two orders of magnitude slower and they carry no usable mass
TINY = float(np.finfo(np.float64).tiny)
# the bundled TBB is too old for numba; OpenMP is always present
if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "omp"


def set_threads(n: int) -> None:
    nb.set_num_threads(max(1, min(int(n), nb.config.NUMBA_NUM_THREADS)))


def get_threads() -> int:
    return nb.get_num_threads()


@nb.njit(parallel=True, fastmath=True, cache=_CACHE)
def convolve_rows(src, rows, wa, we, wi, out):  # pragma: no cover - compiled
    """Separable 3-pass convolution of ``src[rows[r]]`` into ``out[r]``.

    Lines that are entirely zero after a pass are tracked and skipped by the
    next one; skipping them only omits exact zero terms.
    """
    m = rows.size
    n_a, n_e, n_i = src.shape[1], src.shape[2], src.shape[3]
    ha = (wa.size - 1) // 2
    he = (we.size - 1) // 2
    hi = (wi.size - 1) // 2
    for r in prange(m):
        s = src[rows[r]]
        o = out[r]
        pad = np.empty(n_i + 2 * hi)
        t1 = np.zeros((n_a, n_e, n_i))
        t2 = np.zeros((n_a, n_e, n_i))
        nz1 = np.zeros((n_a, n_e), dtype=np.bool_)
        nz2 = np.zeros((n_a, n_e), dtype=np.bool_)
        mass_in = 0.0
        for a in range(n_a):
            for e in range(n_e):
                line = 0.0
                for i in range(n_i):
                    v = s[a, e, i]
                    pad[hi + i] = v
                    line += v
                if line == 0.0:
                    continue
                mass_in += line
                nz1[a, e] = True
                for k in range(hi):
                    pad[k] = s[a, e, n_i - hi + k]
                    pad[hi + n_i + k] = s[a, e, k]
                row = t1[a, e]
                for k in range(2 * hi + 1):
                    w = wi[k]
                    for i in range(n_i):
                        row[i] += w * pad[i + k]
        for a in range(n_a):
            for e in range(n_e):
                lo = max(0, e - he)
                up = min(n_e - 1, e + he)
                row = t2[a, e]
                hit = False
                for ee in range(lo, up + 1):
                    if not nz1[a, ee]:
                        continue
                    hit = True
                    w = we[ee - e + he]
                    src_row = t1[a, ee]
                    for i in range(n_i):
                        row[i] += w * src_row[i]
                nz2[a, e] = hit
        mass_out = 0.0
        for a in range(n_a):
            for e in range(n_e):
                row = o[a, e]
                for i in range(n_i):
                    row[i] = 0.0
                for k in range(2 * ha + 1):
                    aa = (a + k - ha) % n_a
                    if not nz2[aa, e]:
                        continue
                    w = wa[k]
                    src_row = t2[aa, e]
                    for i in range(n_i):
                        row[i] += w * src_row[i]
                for i in range(n_i):
                    mass_out += row[i]
        if mass_out > 0.0:
            scale = mass_in / mass_out
            for a in range(n_a):
                for e in range(n_e):
                    for i in range(n_i):
                        v = o[a, e, i] * scale
                        o[a, e, i] = v if v >= TINY else 0.0


@nb.njit(parallel=True, cache=_CACHE)
def rows_max(values, rows, out):  # pragma: no cover - compiled
    """Per-column maximum over ``values[rows]``, blocked over columns."""
    t = values.shape[1]
    block = 4096
    n_blocks = (t + block - 1) // block
    for b in prange(n_blocks):
        lo = b * block
        hi = min(t, lo + block)
        for j in range(lo, hi):
            out[j] = values[rows[0], j]
        for k in range(1, rows.size):
            row = values[rows[k]]
            for j in range(lo, hi):
                if row[j] > out[j]:
                    out[j] = row[j]


@nb.njit(cache=_CACHE)
def neg_scaled_sq_gap(s_max, scores, c, out):  # pragma: no cover - compiled
    """``out = -c * (s_max - scores)^2`` in float64."""
    for j in range(scores.size):
        d = s_max - np.float64(scores[j])
        out[j] = -(d * d) * c


@nb.njit(cache=_CACHE, fastmath={"reassoc"})
def multiply_sum(values, weights):  # pragma: no cover - compiled
    """In-place ``values *= weights`` (subnormal products flushed); returns their sum."""
    acc = 0.0
    for j in range(values.size):
        v = values[j] * weights[j]
        v = v if v >= TINY else 0.0
        values[j] = v
        acc += v
    return acc
