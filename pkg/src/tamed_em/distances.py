"""Empirical distances between endpoint ensembles, plus ensemble I/O."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream, path_normals
from .sde_model import lyapunov_values

__all__ = [
    "PathEnsemble",
    "EnsembleError",
    "wasserstein1_1d",
    "sliced_wasserstein1",
    "tv_histogram",
    "default_bins",
    "lyapunov_moment",
    "write_binary",
    "read_binary",
    "write_csv",
    "read_csv",
]

MAGIC = b"TSDE"
VERSION = 1
# magic, version (u32), d (u32), M (u64), little endian
_HEADER = struct.Struct("<4sIIQ")


class EnsembleError(ValueError):
    pass


@dataclass
class PathEnsemble:
    samples: np.ndarray
    checkpoint_time: float = math.nan
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise EnsembleError(f"samples must be (M, d), got shape {s.shape}")
        if s.shape[0] < 2:
            raise EnsembleError("an ensemble needs at least two samples")
        if not np.all(np.isfinite(s)):
            raise EnsembleError("ensemble contains non-finite samples")
        self.samples = s

    @property
    def dim(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]


def _as_samples(a):
    if isinstance(a, PathEnsemble):
        return a.samples
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def wasserstein1_1d(a, b):
    """W1 between two equal-size empirical measures on the line (sorted coupling)."""
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise EnsembleError("wasserstein1_1d needs one-dimensional samples")
    if a.shape[0] != b.shape[0]:
        raise EnsembleError(f"ensemble sizes differ ({a.shape[0]} vs {b.shape[0]})")
    return float(np.mean(np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0]))))


def sliced_wasserstein1(a, b, n_projections=64, seed=0):
    """Average 1-d W1 of the projections on random unit directions.

    Directions are normalised keyed Gaussians, so the value is reproducible
    for a given ``seed``.  In one dimension this is exactly ``wasserstein1_1d``.
    """
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise EnsembleError("ensembles live in different dimensions")
    if a.shape[0] != b.shape[0]:
        raise EnsembleError(f"ensemble sizes differ ({a.shape[0]} vs {b.shape[0]})")
    d = a.shape[1]
    if d == 1:
        return wasserstein1_1d(a, b)
    dirs = path_normals(seed, Stream.PROJECTIONS, 0, int(n_projections), d)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.mean(np.mean(np.abs(pa - pb), axis=0)))


def default_bins(M):
    return int(min(256, max(8, math.ceil(M ** (1.0 / 3.0)))))


def tv_histogram(a, b, bins_per_dim=None):
    """Half the L1 distance between histograms on a shared grid.

    The grid spans the pooled sample range widened by 5% of its length on
    each side.  This is biased upward for continuous laws; use it for
    trends, not absolute levels.
    """
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise EnsembleError("ensembles live in different dimensions")
    d = a.shape[1]
    if d > 3:
        raise EnsembleError(f"histogram TV supports d <= 3, got d = {d}")
    if bins_per_dim is None:
        bins_per_dim = default_bins(min(len(a), len(b)))
    pooled = np.vstack([a, b])
    lo, hi = pooled.min(axis=0), pooled.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    edges = [np.linspace(lo[i] - 0.05 * span[i], hi[i] + 0.05 * span[i], bins_per_dim + 1) for i in range(d)]
    ha, _ = np.histogramdd(a, bins=edges)
    hb, _ = np.histogramdd(b, bins=edges)
    return float(0.5 * np.abs(ha / len(a) - hb / len(b)).sum())


def lyapunov_moment(a, p=3.0):
    """Sample mean of ``V(x)**p`` with its standard error and a saturation flag."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    vals, sat = lyapunov_values(_as_samples(a), p)
    n = len(vals)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return float(vals.mean()), se, bool(sat.any())


# ---------------------------------------------------------------------------
# serialisation


def write_binary(path, ensemble):
    s = _as_samples(ensemble)
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, s.shape[1], s.shape[0]))
            fh.write(np.ascontiguousarray(s, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write ensemble to {path}: {exc}") from exc


def read_binary(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise EnsembleError(f"{path}: truncated header")
    magic, version, d, M = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise EnsembleError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EnsembleError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size :]
    if len(body) != 8 * d * M:
        raise EnsembleError(f"{path}: expected {d * M} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(M, d).astype(np.float64)


def write_csv(path, ensemble):
    s = _as_samples(ensemble)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(s.shape[1])])
        for row in s:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
