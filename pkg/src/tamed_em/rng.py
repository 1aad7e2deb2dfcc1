"""Counter-based Gaussian noise keyed by (seed, stream tag, path, step).

Every normal variate is a pure function of its key, so paths can be
simulated in any order (or in parallel) and still reproduce bit for bit.

Generator: Philox4x32-10.  Counter words are ``(block_lo, block_hi,
path_index, stream_tag)`` and the 64-bit master seed is the key.  Each
block yields two standard normals through the Box-Muller transform::

    u1 = ((w0 << 32 | w1) >> 11) + 1) * 2**-53      # in (0, 1]
    u2 =  ((w2 << 32 | w3) >> 11)     * 2**-53      # in [0, 1)
    z0 = sqrt(-2 log u1) cos(2 pi u2)
    z1 = sqrt(-2 log u1) sin(2 pi u2)

The normals of one path form a single flat sequence; the ``d`` components
used at step ``k`` are entries ``k*d .. k*d + d - 1`` of it, so block ``j``
holds flat entries ``2j`` and ``2j + 1``.
"""

from __future__ import annotations

import enum
import math

import numba as nb
import numpy as np

__all__ = [
    "Stream",
    "philox4x32",
    "standard_normals",
    "path_normals",
]

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0
_MASK32 = 0xFFFFFFFF


class Stream(enum.IntEnum):
    """Stream tags separating the independent noise families."""

    VARIABLE = 1
    REFERENCE = 2
    COUPLED = 3
    TANGENT = 4
    PROJECTIONS = 5
    GAUSSIAN_PROBE = 6
    ASSUMPTION_PROBE = 7
    FINITE_DIFFERENCE = 8


@nb.njit
def _philox(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = np.uint64(c0) * np.uint64(0xD2511F53)
        p1 = np.uint64(c2) * np.uint64(0xCD9E8D57)
        hi0 = np.uint32(p0 >> np.uint64(32))
        lo0 = np.uint32(p0 & np.uint64(0xFFFFFFFF))
        hi1 = np.uint32(p1 >> np.uint64(32))
        lo1 = np.uint32(p1 & np.uint64(0xFFFFFFFF))
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = np.uint32(k0 + np.uint32(0x9E3779B9))
        k1 = np.uint32(k1 + np.uint32(0xBB67AE85))
    return c0, c1, c2, c3


def philox4x32(counter, key):
    """Raw Philox4x32-10 bijection, exposed for known-answer tests."""
    c = [np.uint32(v & _MASK32) for v in counter]
    k = [np.uint32(v & _MASK32) for v in key]
    return tuple(int(v) for v in _philox(c[0], c[1], c[2], c[3], k[0], k[1]))


@nb.njit
def _block_pair(seed, tag, path, block):
    k0 = np.uint32(seed & 0xFFFFFFFF)
    k1 = np.uint32((seed >> 32) & 0xFFFFFFFF)
    w0, w1, w2, w3 = _philox(
        np.uint32(block & 0xFFFFFFFF),
        np.uint32((block >> 32) & 0xFFFFFFFF),
        np.uint32(path & 0xFFFFFFFF),
        np.uint32(tag & 0xFFFFFFFF),
        k0,
        k1,
    )
    a = (np.uint64(w0) << np.uint64(32)) | np.uint64(w1)
    b = (np.uint64(w2) << np.uint64(32)) | np.uint64(w3)
    u1 = np.float64((a >> np.uint64(11)) + np.uint64(1)) * _INV_2_53
    u2 = np.float64(b >> np.uint64(11)) * _INV_2_53
    rad = math.sqrt(-2.0 * math.log(u1))
    return rad * math.cos(_TWO_PI * u2), rad * math.sin(_TWO_PI * u2)


@nb.njit
def fill_step_normals(seed, tag, path, step, out, cache):
    """Write the ``len(out)`` normals of ``step`` into ``out``.

    ``cache`` is a length-3 float array ``[block, z0, z1]`` holding the last
    generated block; pass ``[-1, 0, 0]`` initially.  Consecutive steps of a
    1-d path then share one Philox call per two steps.
    """
    d = out.shape[0]
    base = np.int64(step) * d
    for i in range(d):
        flat = base + i
        block = flat >> 1
        if cache[0] != block:
            z0, z1 = _block_pair(seed, tag, path, np.int64(block))
            cache[0] = block
            cache[1] = z0
            cache[2] = z1
        out[i] = cache[1 + (flat & 1)]


@nb.njit
def _normals_for_paths(seed, tag, paths, step, d):
    out = np.empty((paths.shape[0], d))
    cache = np.empty(3)
    row = np.empty(d)
    for p in range(paths.shape[0]):
        cache[0] = -1.0
        fill_step_normals(seed, tag, paths[p], step, row, cache)
        out[p, :] = row
    return out


@nb.njit
def _path_normal_sequence(seed, tag, path, n_steps, d):
    out = np.empty((n_steps, d))
    cache = np.empty(3)
    cache[0] = -1.0
    row = np.empty(d)
    for k in range(n_steps):
        fill_step_normals(seed, tag, path, k, row, cache)
        out[k, :] = row
    return out


def _check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    # numba wants a signed int64; the bit pattern is what matters
    return np.int64(np.uint64(seed).view(np.int64))


def standard_normals(seed, tag, path_index, step_index, d):
    """The ``d`` standard normals for one (path, step) key.

    ``path_index`` may be an integer or an array of indices, in which case
    an ``(len(paths), d)`` array is returned.
    """
    paths = np.atleast_1d(np.asarray(path_index, dtype=np.int64))
    z = _normals_for_paths(_check_seed(seed), int(tag), paths, int(step_index), int(d))
    if np.ndim(path_index) == 0:
        return z[0]
    return z


def path_normals(seed, tag, path_index, n_steps, d):
    """All step normals of one path, shape ``(n_steps, d)``."""
    return _path_normal_sequence(_check_seed(seed), int(tag), int(path_index), int(n_steps), int(d))

