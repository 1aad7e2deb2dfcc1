"""Numerical probes of the step-sum and Gaussian-tail inequalities, and log-log rate fitting.

The inequalities only assert that some constant exists, so every probe
reports fitted constants (ratios) and leaves the stability judgement to a
stated tolerance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .rng import Stream, _check_seed, path_normals
from .step_schedule import StepSchedule, theta_min

__all__ = [
    "RateFit",
    "rate_fit",
    "StepSums",
    "lemma_a1_sums",
    "GaussianTailProbe",
    "lemma_a2_mc",
    "probe_record",
]


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    @property
    def constant(self):
        return math.exp(self.intercept)

    def predict(self, eta):
        return self.constant * np.asarray(eta, dtype=np.float64) ** self.slope


def rate_fit(points):
    """Least-squares fit of ``log distance = slope * log eta + intercept``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be a sequence of (eta, distance) pairs")
    if pts.shape[0] < 3:
        raise ValueError(f"need at least 3 points, got {pts.shape[0]}")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("eta and distance values must be positive and finite")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ValueError("eta values are all equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return RateFit(slope, intercept, r2, int(pts.shape[0]))


@dataclass(frozen=True)
class StepSums:
    n: int
    K_n: int | None
    S1: float
    S2: float
    S3: float
    ratio1: float
    ratio2: float
    ratio3: float
    empty_range: bool
    hypothesis_ok: bool
    theta_min: float


def _tail_sums(e):
    """``t_n - t_k`` for ``k = 0..n`` as compensated suffix sums."""
    n = e.shape[0]
    out = np.empty(n + 1)
    s = c = 0.0
    out[n] = 0.0
    for k in range(n - 1, -1, -1):
        x = e[k]
        t = s + x
        if abs(s) >= abs(x):
            c += (s - t) + x
        else:
            c += (x - t) + s
        s = t
        out[k] = s + c
    return out


def lemma_a1_sums(schedule: StepSchedule, beta, c, n):
    """Three weighted step sums and their ratios to the claimed orders.

    ``S1 = sum_{k<=n} eta_k^(1+beta) exp(-c (t_n - t_k))``,
    ``S2 = sum_{K_n<=k<n} eta_k^(1+beta) / sqrt(t_n - t_k)`` and
    ``S3 = sum_{K_n<=k<n} eta_k^(1+beta) / (t_n - t_k)`` where
    ``K_n = min{k >= 1 : t_n - t_k <= 1}``.  Ratios are ``S1/eta_n^beta``,
    ``S2/eta_n^beta`` and ``S3/(eta_n^beta |ln eta_n|)``.
    """
    if not 0 < beta <= 0.5:
        raise ValueError(f"beta must lie in (0, 1/2], got {beta}")
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    e = schedule.etas(n)
    gap = _tail_sums(e)  # gap[k] = t_n - t_k
    w = e ** (1.0 + beta)  # w[k-1] = eta_k^(1+beta)
    S1 = float(np.sum(w * np.exp(-c * gap[1:])))

    # gap is non-increasing in k; K_n is the first k >= 1 with gap[k] <= 1
    K = int(np.searchsorted(-gap[1:], -1.0, side="left")) + 1
    empty = gap[0] <= 1.0 or K > n - 1
    if empty:
        S2 = S3 = 0.0
        K_n = None
    else:
        sl = slice(K - 1, n - 1)
        g = gap[K : n]
        S2 = float(np.sum(w[sl] / np.sqrt(g)))
        S3 = float(np.sum(w[sl] / g))
        K_n = K
    en = e[-1]
    th = theta_min(schedule, max(n, 2)) if (schedule.kind == "polynomial" or len(schedule.values) >= 2) else 0.0
    return StepSums(
        n=n,
        K_n=K_n,
        S1=S1,
        S2=S2,
        S3=S3,
        ratio1=S1 / en**beta,
        ratio2=S2 / en**beta,
        ratio3=S3 / (en**beta * abs(math.log(en))) if en != 1.0 else math.inf,
        empty_range=bool(empty),
        hypothesis_ok=bool(th < c * math.exp(-c) / beta),
        theta_min=float(th),
    )


@dataclass(frozen=True)
class GaussianTailProbe:
    eta: float
    M: int
    lhs_outside: float
    se_outside: float
    lhs_inside: float | None
    se_inside: float | None
    C_outside: float
    C_inside: float | None
    inside_applicable: bool


def lemma_a2_mc(mu, Sigma, eta, M, seed):
    """Monte Carlo of the Gaussian exponential-moment bounds.

    With ``xi ~ N(mu, eta Sigma)`` estimates
    ``E[e^|xi| ; |xi - mu| >= 1/3]`` (fitted constant ``lhs / (eta e^|mu|)``)
    and, when ``|mu| >= 2/3``, ``E[e^|xi| ; |xi - mu| < 1/3]`` (fitted
    constant ``(ln lhs - |mu|) / eta``).
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    d = mu.shape[0]
    Sigma = np.asarray(Sigma, dtype=np.float64).reshape(d, d)
    if not np.allclose(Sigma, Sigma.T):
        raise ValueError("Sigma must be symmetric")
    evals = np.linalg.eigvalsh(Sigma)
    if evals.min() <= 0:
        raise ValueError("Sigma must be positive definite")
    if not eta > 0:
        raise ValueError("eta must be positive")
    if eta * evals.max() > 1.0 / 6.0:
        raise ValueError(f"hypothesis eta*||Sigma|| <= 1/6 violated (eta*||Sigma|| = {eta * evals.max():.4g})")
    M = int(M)
    L = np.linalg.cholesky(Sigma)
    z = path_normals(_check_seed(seed), Stream.GAUSSIAN_PROBE, 0, M, d)
    dev = math.sqrt(eta) * (z @ L.T)
    xi = mu + dev
    vals = np.exp(np.linalg.norm(xi, axis=1))
    outside = np.linalg.norm(dev, axis=1) >= 1.0 / 3.0
    f_out = np.where(outside, vals, 0.0)
    lhs_out = float(f_out.mean())
    se_out = float(f_out.std(ddof=1) / math.sqrt(M))
    norm_mu = float(np.linalg.norm(mu))
    applicable = norm_mu >= 2.0 / 3.0
    lhs_in = se_in = C_in = None
    if applicable:
        f_in = np.where(outside, 0.0, vals)
        lhs_in = float(f_in.mean())
        se_in = float(f_in.std(ddof=1) / math.sqrt(M))
        C_in = (math.log(lhs_in) - norm_mu) / eta
    return GaussianTailProbe(
        eta=float(eta),
        M=M,
        lhs_outside=lhs_out,
        se_outside=se_out,
        lhs_inside=lhs_in,
        se_inside=se_in,
        C_outside=lhs_out / (eta * math.exp(norm_mu)),
        C_inside=C_in,
        inside_applicable=applicable,
    )


def probe_record(name, parameters, values, tolerances, passed):
    """JSON-ready record for a probe result."""

    def clean(v):
        if hasattr(v, "__dataclass_fields__"):
            v = asdict(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return v.item()
        if isinstance(v, np.ndarray):
            return v.tolist()
        return v

    return {
        "probe": name,
        "parameters": clean(parameters),
        "values": clean(values),
        "tolerances": clean(tolerances),
        "pass": bool(passed),
    }
