"""Tamed Euler-Maruyama simulation.

One step of the scheme with step ``eta`` and taming exponent ``alpha``::

    y' = y + eta * b(y) / (1 + eta**alpha * ||grad b(y)||) + sigma(y) dB,   dB ~ N(0, eta I)

The batch kernels below loop over paths and steps in compiled code.  Noise
for (path, step) comes from :mod:`tamed_em.rng`, so results depend only on
``(master_seed, stream, path_index)`` and never on how paths are grouped
into batches or threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from .rng import Stream, _check_seed, fill_step_normals, standard_normals
from .sde_model import _power_opnorm, jacobian_opnorm
from .step_schedule import grid_time, grid_times

__all__ = [
    "DivergenceError",
    "PathState",
    "NoiseIncrement",
    "TangentState",
    "EnsembleRun",
    "taming_factor",
    "tamed_step",
    "simulate_path",
    "simulate_ensemble",
    "simulate_reference",
    "reference_ensemble",
    "coupled_one_step",
    "coupled_one_step_ensemble",
    "simulate_tangent",
    "tangent_ensemble",
    "bel_gradient",
    "fd_gradient",
    "set_threads",
]

_THREADS = 1
_CHUNK = 4096


def set_threads(n):
    """Worker threads used by the ensemble drivers (results do not depend on it)."""
    global _THREADS
    _THREADS = max(1, int(n))


class DivergenceError(RuntimeError):
    def __init__(self, step_index, position, path_index=None):
        self.step_index = int(step_index)
        self.position = np.asarray(position)
        self.path_index = path_index
        where = f" on path {path_index}" if path_index is not None else ""
        super().__init__(f"non-finite state at step {self.step_index}{where}: {self.position}")


def taming_factor(eta, alpha, opnorm):
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")
    return 1.0 / (1.0 + eta**alpha * opnorm)


@dataclass(frozen=True)
class PathState:
    position: np.ndarray
    time: float = 0.0
    step_index: int = 0
    # (master_seed, stream_tag, path_index); the counter is step_index
    rng_state: tuple = (0, int(Stream.VARIABLE), 0)


@dataclass(frozen=True)
class NoiseIncrement:
    dB: np.ndarray
    eta: float

    @classmethod
    def draw(cls, master_seed, stream_tag, path_index, step_index, eta, d):
        z = standard_normals(master_seed, stream_tag, path_index, step_index, d)
        return cls(math.sqrt(eta) * z, float(eta))

    @classmethod
    def for_state(cls, state, eta):
        seed, tag, path = state.rng_state
        return cls.draw(seed, tag, path, state.step_index, eta, len(state.position))


def tamed_step(problem, state, eta, alpha, noise):
    if noise.eta != eta:
        raise ValueError("noise increment was drawn for a different step size")
    x = np.asarray(state.position, dtype=np.float64)
    bx = problem.drift(x)
    g = jacobian_opnorm(problem.drift_jacobian(x))
    fac = taming_factor(eta, alpha, g)
    disp = eta * fac * bx
    # per-step displacement bounds implied by the taming
    assert np.linalg.norm(disp) <= eta * np.linalg.norm(bx) * (1 + 1e-12)
    assert g < 1 or np.linalg.norm(disp) <= eta ** (1 - alpha) * np.linalg.norm(bx) / g * (1 + 1e-12)
    s = problem.diffusion(x)
    new = x + disp + s @ noise.dB
    if not np.all(np.isfinite(new)):
        raise DivergenceError(state.step_index + 1, new, state.rng_state[2])
    return replace(state, position=new, time=state.time + eta, step_index=state.step_index + 1)


# ---------------------------------------------------------------------------
# compiled kernels


@nb.njit
def _abs_opnorm(J):
    return abs(J[0, 0])


def _opnorm_for(problem):
    # a d=1 kernel must not even reference the power iteration: numba
    # otherwise compiles a step several times slower
    return _abs_opnorm if problem.dim == 1 else _power_opnorm


@nb.njit(nogil=True)
def _tamed_update(b, db, sig, op, x, eta, eta_alpha, z, sq, bx, J, S, xn):
    b(x, bx)
    db(x, J)
    sig(x, S)
    fac = 1.0 / (1.0 + eta_alpha * op(J))
    d = x.shape[0]
    ok = True
    for i in range(d):
        acc = 0.0
        for l in range(d):
            acc += S[i, l] * (sq * z[l])
        xn[i] = x[i] + eta * fac * bx[i] + acc
        if not math.isfinite(xn[i]):
            ok = False
    return ok


@nb.njit(nogil=True)
def _variable_kernel(b, db, sig, op, seed, tag, x0, etas, checkpoints, alpha, paths):
    d = x0.shape[0]
    M = paths.shape[0]
    nck = checkpoints.shape[0]
    out = np.full((nck, M, d), np.nan)
    div_step = np.full(M, -1, dtype=np.int64)
    z = np.empty(d)
    x = np.empty(d)
    xn = np.empty(d)
    bx = np.empty(d)
    J = np.empty((d, d))
    S = np.empty((d, d))
    cache = np.empty(3)
    n_steps = etas.shape[0]
    if nck > 0:
        n_steps = min(n_steps, checkpoints[nck - 1])
    for p in range(M):
        x[:] = x0
        cache[0] = -1.0
        j = 0
        for n in range(n_steps + 1):
            while j < nck and checkpoints[j] == n:
                out[j, p, :] = x
                j += 1
            if n == n_steps:
                break
            eta = etas[n]
            fill_step_normals(seed, tag, paths[p], n, z, cache)
            if not _tamed_update(b, db, sig, op, x, eta, eta**alpha, z, math.sqrt(eta), bx, J, S, xn):
                div_step[p] = n + 1
                break
            x[:] = xn
    return out, div_step


@nb.njit(nogil=True)
def _reference_kernel(b, db, sig, op, seed, tag, x0, times, h, alpha, paths):
    d = x0.shape[0]
    M = paths.shape[0]
    nt = times.shape[0]
    out = np.full((nt, M, d), np.nan)
    div_step = np.full(M, -1, dtype=np.int64)
    z = np.empty(d)
    x = np.empty(d)
    xn = np.empty(d)
    bx = np.empty(d)
    J = np.empty((d, d))
    S = np.empty((d, d))
    cache = np.empty(3)
    h_alpha = h**alpha
    sq_h = math.sqrt(h)
    for p in range(M):
        x[:] = x0
        cache[0] = -1.0
        k = 0
        t_prev = 0.0
        dead = False
        for j in range(nt):
            span = times[j] - t_prev
            if span > 0.0:
                n_seg = int(math.ceil(span / h * (1.0 - 1e-12)))
                if n_seg < 1:
                    n_seg = 1
                for i in range(n_seg):
                    if i < n_seg - 1:
                        step, step_alpha, sq = h, h_alpha, sq_h
                    else:
                        # last step lands exactly on the checkpoint
                        step = span - (n_seg - 1) * h
                        step_alpha = step**alpha
                        sq = math.sqrt(step)
                    fill_step_normals(seed, tag, paths[p], k, z, cache)
                    k += 1
                    if not _tamed_update(b, db, sig, op, x, step, step_alpha, z, sq, bx, J, S, xn):
                        div_step[p] = k
                        dead = True
                        break
                    x[:] = xn
                t_prev = times[j]
            if dead:
                break
            out[j, p, :] = x
    return out, div_step


@nb.njit(nogil=True)
def _coupled_kernel(b, db, sig, op, seed, tag, x0, eta, alpha, n_sub, paths):
    d = x0.shape[0]
    M = paths.shape[0]
    fine = np.empty((M, d))
    one = np.empty((M, d))
    z = np.empty(d)
    total = np.empty(d)
    x = np.empty(d)
    xn = np.empty(d)
    bx = np.empty(d)
    J = np.empty((d, d))
    S = np.empty((d, d))
    b0 = np.empty(d)
    J0 = np.empty((d, d))
    S0 = np.empty((d, d))
    cache = np.empty(3)
    h = eta / n_sub
    h_alpha = h**alpha
    sq = math.sqrt(h)
    b(x0, b0)
    db(x0, J0)
    sig(x0, S0)
    fac0 = 1.0 / (1.0 + eta**alpha * op(J0))
    for p in range(M):
        x[:] = x0
        total[:] = 0.0
        cache[0] = -1.0
        for k in range(n_sub):
            fill_step_normals(seed, tag, paths[p], k, z, cache)
            for i in range(d):
                total[i] += sq * z[i]
            _tamed_update(b, db, sig, op, x, h, h_alpha, z, sq, bx, J, S, xn)
            x[:] = xn
        fine[p, :] = x
        for i in range(d):
            acc = 0.0
            for l in range(d):
                acc += S0[i, l] * total[l]
            one[p, i] = x0[i] + eta * fac0 * b0[i] + acc
    return fine, one


@nb.njit(nogil=True)
def _tangent_kernel(b, db, sig, dsig, seed, tag, x0, v, t_final, h, paths):
    d = x0.shape[0]
    M = paths.shape[0]
    X = np.full((M, d), np.nan)
    R = np.full((M, d), np.nan)
    I = np.full(M, np.nan)
    status = np.zeros(M, dtype=np.int64)
    z = np.empty(d)
    dB = np.empty(d)
    x = np.empty(d)
    r = np.empty(d)
    xn = np.empty(d)
    rn = np.empty(d)
    bx = np.empty(d)
    J = np.empty((d, d))
    S = np.empty((d, d))
    dS = np.empty((d, d))
    cache = np.empty(3)
    n = 0
    if t_final > 0.0:
        n = int(math.ceil(t_final / h * (1.0 - 1e-12)))
        if n < 1:
            n = 1
    for p in range(M):
        x[:] = x0
        r[:] = v
        acc_int = 0.0
        cache[0] = -1.0
        for k in range(n):
            step = h if k < n - 1 else t_final - (n - 1) * h
            sq = math.sqrt(step)
            fill_step_normals(seed, tag, paths[p], k, z, cache)
            for i in range(d):
                dB[i] = sq * z[i]
            b(x, bx)
            db(x, J)
            sig(x, S)
            dsig(x, r, dS)
            # weight increment <sigma(X)^-1 R, dB>
            if d == 1:
                if S[0, 0] == 0.0:
                    status[p] = 2
                    break
                acc_int += r[0] / S[0, 0] * dB[0]
            else:
                if abs(np.linalg.det(S)) < 1e-300:
                    status[p] = 2
                    break
                w = np.linalg.solve(S, r)
                for i in range(d):
                    acc_int += w[i] * dB[i]
            for i in range(d):
                a = 0.0
                c = 0.0
                e = 0.0
                for l in range(d):
                    a += S[i, l] * dB[l]
                    c += J[i, l] * r[l]
                    e += dS[i, l] * dB[l]
                xn[i] = x[i] + step * bx[i] + a
                rn[i] = r[i] + step * c + e
            bad = False
            for i in range(d):
                if not (math.isfinite(xn[i]) and math.isfinite(rn[i])):
                    bad = True
            if bad:
                status[p] = 1
                break
            x[:] = xn
            r[:] = rn
        if status[p] == 0:
            X[p, :] = x
            R[p, :] = r
            I[p] = acc_int
    return X, R, I, status


# ---------------------------------------------------------------------------
# drivers


def _run_chunked(fn, paths):
    """Apply ``fn`` to consecutive chunks of path indices and stitch results.

    ``fn`` returns a tuple of arrays whose path axis is given by ``axes``;
    chunking never changes any per-path value.
    """
    chunks = [paths[i : i + _CHUNK] for i in range(0, len(paths), _CHUNK)] or [paths]
    if _THREADS > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(_THREADS) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return parts


def _paths(M, path_offset=0):
    return np.arange(path_offset, path_offset + int(M), dtype=np.int64)


def _x0(problem, x0):
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] == 1 and problem.dim > 1:
        x0 = np.full(problem.dim, x0[0])
    if x0.shape[0] != problem.dim:
        raise ValueError(f"x0 has dimension {x0.shape[0]}, problem has {problem.dim}")
    return x0


def _check_alpha(alpha):
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha}")


@dataclass
class EnsembleRun:
    """Checkpoint samples of ``M`` paths.

    ``positions[j, m]`` is path ``m`` at ``steps[j]`` (``NaN`` after a
    divergence); ``diverged_at[m]`` is the failing step or ``-1``.
    """

    steps: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    diverged_at: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_diverged(self):
        return int(np.count_nonzero(self.diverged_at >= 0))

    def finite(self, j):
        """Samples at checkpoint ``j`` of the paths that did not diverge."""
        return self.positions[j][self.diverged_at < 0]


def simulate_ensemble(problem, schedule, alpha, x0, checkpoints, M, master_seed, *,
                      path_offset=0, stream=Stream.VARIABLE):
    """Variable-step tamed runs of ``M`` paths observed at step indices ``checkpoints``."""
    _check_alpha(alpha)
    ck = np.asarray(checkpoints, dtype=np.int64)
    if ck.size and (np.any(np.diff(ck) < 0) or ck[0] < 0):
        raise ValueError("checkpoints must be sorted and non-negative")
    n_steps = int(ck[-1]) if ck.size else 0
    etas = schedule.etas(n_steps)
    x0 = _x0(problem, x0)
    seed = _check_seed(master_seed)
    op = _opnorm_for(problem)

    def run(chunk):
        return _variable_kernel(problem.b, problem.db, problem.sigma, op, seed, int(stream),
                                x0, etas, ck, float(alpha), chunk)

    parts = _run_chunked(run, _paths(M, path_offset))
    pos = np.concatenate([p[0] for p in parts], axis=1)
    div = np.concatenate([p[1] for p in parts])
    times = grid_times(schedule, n_steps)[ck]
    return EnsembleRun(ck, np.asarray(times), pos, div,
                       {"master_seed": int(master_seed), "stream": int(stream),
                        "schedule": schedule.to_dict(), "alpha": float(alpha)})


def simulate_path(problem, schedule, alpha, x0, n_steps, checkpoints, path_index, master_seed):
    """Positions of one path at the requested step indices.

    Equivalent to iterating :func:`tamed_step` with noise keyed by
    ``(master_seed, VARIABLE, path_index, step)``.
    """
    ck = sorted(int(c) for c in checkpoints) if checkpoints is not None else [n_steps]
    if not ck:
        ck = [0] if n_steps == 0 else []
    if ck and ck[-1] > n_steps:
        raise ValueError("checkpoints must not exceed n_steps")
    run = simulate_ensemble(problem, schedule, alpha, x0, ck, 1, master_seed, path_offset=path_index)
    if run.n_diverged:
        step = int(run.diverged_at[0])
        raise DivergenceError(step, run.positions[:, 0][-1], path_index)
    return [(c, run.positions[j, 0].copy()) for j, c in enumerate(ck)]


def reference_ensemble(problem, times, eta_ref, x0, M, master_seed, alpha, *,
                       path_offset=0, stream=Stream.REFERENCE):
    """Constant-step tamed runs observed at the (sorted) ``times``.

    The step is ``eta_ref`` except that the step before each observation
    time is shortened so the time is hit exactly.
    """
    _check_alpha(alpha)
    if not eta_ref > 0:
        raise ValueError("eta_ref must be positive")
    times = np.asarray(times, dtype=np.float64)
    if times.size and (np.any(np.diff(times) < 0) or times[0] < 0):
        raise ValueError("times must be sorted and non-negative")
    x0 = _x0(problem, x0)
    seed = _check_seed(master_seed)
    op = _opnorm_for(problem)

    def run(chunk):
        return _reference_kernel(problem.b, problem.db, problem.sigma, op, seed, int(stream),
                                 x0, times, float(eta_ref), float(alpha), chunk)

    parts = _run_chunked(run, _paths(M, path_offset))
    pos = np.concatenate([p[0] for p in parts], axis=1)
    div = np.concatenate([p[1] for p in parts])
    return EnsembleRun(np.arange(len(times)), times, pos, div,
                       {"master_seed": int(master_seed), "stream": int(stream),
                        "eta_ref": float(eta_ref), "alpha": float(alpha)})


def simulate_reference(problem, t_final, eta_ref, x0, path_index, master_seed, alpha):
    run = reference_ensemble(problem, [t_final], eta_ref, x0, 1, master_seed, alpha,
                             path_offset=path_index)
    if run.n_diverged:
        raise DivergenceError(int(run.diverged_at[0]), run.positions[0, 0], path_index)
    return run.positions[0, 0].copy()


def coupled_one_step_ensemble(problem, x, eta, alpha, n_sub, M, master_seed, *, path_offset=0):
    """``M`` coupled pairs ``(x_fine, y_one)`` started at ``x``.

    ``y_one`` is the frozen-coefficient step driven by the total Brownian
    increment; ``x_fine`` runs ``n_sub`` tamed sub-steps on the same
    increments.  Paths share their normals across different ``eta``.
    """
    _check_alpha(alpha)
    if n_sub < 1:
        raise ValueError("n_sub must be >= 1")
    x = _x0(problem, x)
    seed = _check_seed(master_seed)
    op = _opnorm_for(problem)

    def run(chunk):
        return _coupled_kernel(problem.b, problem.db, problem.sigma, op, seed, int(Stream.COUPLED),
                               x, float(eta), float(alpha), int(n_sub), chunk)

    parts = _run_chunked(run, _paths(M, path_offset))
    fine = np.concatenate([p[0] for p in parts])
    one = np.concatenate([p[1] for p in parts])
    bad = ~np.all(np.isfinite(fine), axis=1) | ~np.all(np.isfinite(one), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise DivergenceError(n_sub, fine[i], path_offset + i)
    return fine, one


def coupled_one_step(problem, x, eta, alpha, n_sub, path_index, master_seed):
    fine, one = coupled_one_step_ensemble(problem, x, eta, alpha, n_sub, 1, master_seed,
                                          path_offset=path_index)
    return fine[0], one[0]


@dataclass(frozen=True)
class TangentState:
    """Endpoint of the pair (X, R) plus the accumulated BEL weight."""

    base: PathState
    tangent: np.ndarray
    integral_acc: float


def tangent_ensemble(problem, t_final, eta_ref, x0, v, M, master_seed, *,
                     path_offset=0, stream=Stream.TANGENT):
    """Plain Euler for ``X`` and its first variation ``R`` (``R_0 = v``).

    Returns ``(X, R, weights)`` with ``weights = sum <sigma(X)^-1 R, dB>``.
    """
    if not t_final >= 0:
        raise ValueError("t_final must be >= 0")
    if not eta_ref > 0:
        raise ValueError("eta_ref must be positive")
    x0 = _x0(problem, x0)
    v = _x0(problem, v)
    if not np.linalg.norm(v) > 0:
        raise ValueError("direction v must be non-zero")
    seed = _check_seed(master_seed)

    def run(chunk):
        return _tangent_kernel(problem.b, problem.db, problem.sigma, problem.dsigma, seed,
                               int(stream), x0, v, float(t_final), float(eta_ref), chunk)

    parts = _run_chunked(run, _paths(M, path_offset))
    X = np.concatenate([p[0] for p in parts])
    R = np.concatenate([p[1] for p in parts])
    W = np.concatenate([p[2] for p in parts])
    status = np.concatenate([p[3] for p in parts])
    if np.any(status == 2):
        i = int(np.argmax(status == 2))
        raise np.linalg.LinAlgError(f"diffusion matrix singular along path {path_offset + i}")
    if np.any(status == 1):
        i = int(np.argmax(status == 1))
        raise DivergenceError(-1, X[i], path_offset + i)
    return X, R, W


def simulate_tangent(problem, t_final, eta_ref, x0, v, path_index, master_seed):
    X, R, W = tangent_ensemble(problem, t_final, eta_ref, x0, v, 1, master_seed,
                               path_offset=path_index)
    n = int(math.ceil(t_final / eta_ref * (1.0 - 1e-12))) if t_final > 0 else 0
    base = PathState(X[0], float(t_final), n, (int(master_seed), int(Stream.TANGENT), int(path_index)))
    return TangentState(base, R[0], float(W[0]))


def _apply(f, X):
    vals = np.asarray(f(X), dtype=np.float64).reshape(-1)
    if vals.shape[0] != X.shape[0]:
        raise ValueError("f must map an (M, d) array to M values")
    return vals


def bel_gradient(problem, f, t, x0, v, M, eta_ref, master_seed):
    """Bismut-Elworthy-Li estimate of the derivative of ``E f(X_t^x)`` along ``v``.

    ``f`` takes an ``(M, d)`` array and returns ``M`` values.  Returns
    ``(estimate, standard_error)``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if M < 2:
        raise ValueError("need at least two samples")
    X, _, W = tangent_ensemble(problem, t, eta_ref, x0, v, M, master_seed)
    samples = _apply(f, X) * W / t
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(M))


def fd_gradient(problem, f, t, x0, v, M, eta_ref, master_seed, h=1e-2):
    """Central difference ``(P_t f(x0 + h v) - P_t f(x0 - h v)) / 2h`` on common noise."""
    x0 = _x0(problem, x0)
    v = _x0(problem, v)
    Xp, _, _ = tangent_ensemble(problem, t, eta_ref, x0 + h * v, v, M, master_seed,
                                stream=Stream.FINITE_DIFFERENCE)
    Xm, _, _ = tangent_ensemble(problem, t, eta_ref, x0 - h * v, v, M, master_seed,
                                stream=Stream.FINITE_DIFFERENCE)
    diff = (_apply(f, Xp) - _apply(f, Xm)) / (2.0 * h)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(M))
