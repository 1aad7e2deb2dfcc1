"""SDE problems, the Lyapunov function and sampled assumption checks.

A problem is described by four numba-compiled kernels that write into
preallocated buffers, so the integrators can call them without allocating:

    drift(x, out)                    out[:] = b(x)
    drift_jacobian(x, out)           out[:, :] = grad b(x)   (out[i, j] = d b_i / d x_j)
    diffusion(x, out)                out[:, :] = sigma(x)
    diffusion_derivative(x, v, out)  out[:, :] = directional derivative of sigma along v

Use :func:`make_problem` to build one from plain Python functions written
in the numba-compatible subset, or :func:`builtin_problem` for the
registered test problems.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numba as nb
import numpy as np

__all__ = [
    "DeclaredConstants",
    "DiffusionKind",
    "SdeProblem",
    "AssumptionReport",
    "ProbeSpec",
    "InvalidInputError",
    "jacobian_opnorm",
    "lyapunov_V",
    "lyapunov_log",
    "lyapunov_values",
    "check_assumption_A1",
    "check_assumption_A2",
    "make_problem",
    "builtin_problem",
    "BUILTIN_PROBLEMS",
]

# largest exponent with a finite exp()
_LOG_MAX = math.log(np.finfo(np.float64).max)


class InvalidInputError(ValueError):
    pass


class DiffusionKind(str, enum.Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class DeclaredConstants:
    """Constants ``r, L1, lambda, L2`` the problem claims to satisfy."""

    r: float
    L1: float
    lam: float
    L2: float

    def __post_init__(self):
        if not self.r >= 0:
            raise InvalidInputError(f"r must be >= 0, got {self.r}")
        for name in ("L1", "lam", "L2"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class SdeProblem:
    name: str
    dim: int
    b: Callable = field(repr=False)
    db: Callable = field(repr=False)
    sigma: Callable = field(repr=False)
    dsigma: Callable = field(repr=False)
    diffusion_kind: DiffusionKind
    constants: DeclaredConstants

    def _vec(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.dim:
            raise InvalidInputError(f"expected a point of dimension {self.dim}, got {x.shape[0]}")
        return x

    def drift(self, x):
        out = np.empty(self.dim)
        self.b(self._vec(x), out)
        return out

    def drift_jacobian(self, x):
        out = np.empty((self.dim, self.dim))
        self.db(self._vec(x), out)
        return out

    def diffusion(self, x):
        out = np.empty((self.dim, self.dim))
        self.sigma(self._vec(x), out)
        return out

    def diffusion_derivative(self, x, v):
        out = np.empty((self.dim, self.dim))
        self.dsigma(self._vec(x), self._vec(v), out)
        return out


def _fd_diffusion_derivative(sigma):
    @nb.njit
    def dsigma(x, v, out):
        d = x.shape[0]
        nx = 0.0
        for i in range(d):
            nx += x[i] * x[i]
        h = 1e-5 * (1.0 + math.sqrt(nx))
        xp = x + h * v
        xm = x - h * v
        sp = np.empty((d, d))
        sm = np.empty((d, d))
        sigma(xp, sp)
        sigma(xm, sm)
        for i in range(d):
            for j in range(d):
                out[i, j] = (sp[i, j] - sm[i, j]) / (2.0 * h)

    return dsigma


def _jit(fn):
    if fn is None or isinstance(fn, nb.core.dispatcher.Dispatcher):
        return fn
    return nb.njit(fn)


def make_problem(
    name,
    dim,
    drift,
    drift_jacobian,
    diffusion,
    constants,
    *,
    diffusion_derivative=None,
    diffusion_kind=DiffusionKind.MULTIPLICATIVE,
):
    """Assemble an :class:`SdeProblem` from in-place kernels.

    Plain functions are compiled with ``numba.njit``.  Without an explicit
    ``diffusion_derivative`` a central finite difference of ``diffusion``
    is used.
    """
    sigma = _jit(diffusion)
    dsigma = _jit(diffusion_derivative) or _fd_diffusion_derivative(sigma)
    return SdeProblem(
        name=name,
        dim=int(dim),
        b=_jit(drift),
        db=_jit(drift_jacobian),
        sigma=sigma,
        dsigma=dsigma,
        diffusion_kind=DiffusionKind(diffusion_kind),
        constants=constants,
    )


# ---------------------------------------------------------------------------
# operator norm


@nb.njit
def opnorm_kernel(J):
    if J.shape[0] == 1:
        return abs(J[0, 0])
    return _power_opnorm(J)


@nb.njit
def _rayleigh_power(J, B, v):
    """Power iteration for the top eigenvalue of ``J^T J`` starting from ``v``.

    ``B`` holds ``J^T J`` on entry and is squared (and rescaled) after every
    step, so step ``k`` applies ``(J^T J)^(2^k)``.  A plain power step stalls
    when the two largest singular values are close; the squaring makes the
    error contract quadratically and the relative stopping rule reliable.
    """
    d = J.shape[0]
    w = np.empty(d)
    C = np.empty((d, d))
    lam = 0.0
    for _ in range(200):
        nrm = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += B[i, j] * v[j]
            w[i] = acc
            nrm += acc * acc
        nrm = math.sqrt(nrm)
        if nrm == 0.0:
            break
        for i in range(d):
            v[i] = w[i] / nrm
        # Rayleigh quotient |J v|^2
        new = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += J[i, j] * v[j]
            new += acc * acc
        if abs(new - lam) <= 1e-12 * new:
            return new
        lam = new
        big = 0.0
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for k in range(d):
                    acc += B[i, k] * B[k, j]
                C[i, j] = acc
                if abs(acc) > big:
                    big = abs(acc)
        if big == 0.0:
            break
        for i in range(d):
            for j in range(d):
                B[i, j] = C[i, j] / big
    return lam


@nb.njit
def _gram(J):
    d = J.shape[0]
    B = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for k in range(d):
                acc += J[k, i] * J[k, j]
            B[i, j] = acc
    return B


@nb.njit
def _power_opnorm(J):
    d = J.shape[0]
    v = np.full(d, 1.0 / math.sqrt(d))
    lam = _rayleigh_power(J, _gram(J), v)
    # guard against a start vector orthogonal to the top singular vector:
    # every column norm is a lower bound for the largest singular value
    best_col = 0.0
    best_j = 0
    for j in range(d):
        acc = 0.0
        for i in range(d):
            acc += J[i, j] * J[i, j]
        if acc > best_col:
            best_col = acc
            best_j = j
    if lam < best_col * (1.0 - 1e-9):
        v[:] = 0.0
        v[best_j] = 1.0
        lam = max(best_col, _rayleigh_power(J, _gram(J), v))
    return math.sqrt(lam)


def jacobian_opnorm(J):
    """Spectral norm of a square matrix (``|J|`` for scalars)."""
    J = np.atleast_2d(np.asarray(J, dtype=np.float64))
    if J.shape[0] != J.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {J.shape}")
    if not np.all(np.isfinite(J)):
        raise InvalidInputError("matrix has non-finite entries")
    return float(opnorm_kernel(np.ascontiguousarray(J)))


# ---------------------------------------------------------------------------
# Lyapunov function V = exp(s(|x|)), s(rho) = rho outside the unit ball


def _bridge(rho):
    rho = np.asarray(rho, dtype=np.float64)
    inner = 0.375 + 0.75 * rho**2 - 0.125 * rho**4
    return np.where(rho >= 1.0, rho, inner)


def lyapunov_log(x, p=1.0):
    """``log V(x)**p`` for a point ``(d,)`` or a batch ``(M, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite point")
    rho = np.linalg.norm(x, axis=-1) if x.ndim else np.abs(x)
    return p * _bridge(rho)


def lyapunov_values(X, p=1.0):
    """Vectorised ``V(x)**p`` over rows of ``X``; returns ``(values, saturated)``.

    Saturated entries are clipped to the largest finite double instead of
    becoming ``inf``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    logs = lyapunov_log(X, p)
    saturated = logs > _LOG_MAX
    values = np.exp(np.minimum(logs, _LOG_MAX))
    values[saturated] = np.finfo(np.float64).max
    return values, saturated


def lyapunov_V(x, p=1.0, *, return_saturation=False):
    """``V(x)**p`` with ``V = e^{|x|}`` for ``|x| >= 1``.

    Inside the unit ball ``|x|`` is replaced by ``3/8 + 3/4 rho^2 - 1/8 rho^4``,
    which matches value, slope and curvature at ``rho = 1``.
    """
    if not p > 0:
        raise InvalidInputError(f"p must be positive, got {p}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    log_v = float(lyapunov_log(x, p))
    saturated = log_v > _LOG_MAX
    value = np.finfo(np.float64).max if saturated else math.exp(log_v)
    if return_saturation:
        return value, saturated
    return value


# ---------------------------------------------------------------------------
# sampled assumption checks


@dataclass(frozen=True)
class ProbeSpec:
    """Where assumption inequalities are probed.

    Points are a regular grid on ``[-radius, radius]^d`` (odd count, so it
    contains the origin) plus ``n_random`` scrambled Halton points in the
    same box.  Pairs for the local Lipschitz bound join consecutive points.
    """

    radius: float = 10.0
    grid_per_dim: int = 201
    n_random: int = 2000
    seed: int = 0

    def points(self, d):
        from scipy.stats import qmc

        n = self.grid_per_dim if d == 1 else max(3, int(round(self.grid_per_dim ** (1.0 / d))))
        n += 1 - n % 2
        axis = np.linspace(-self.radius, self.radius, n)
        grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
        if self.n_random <= 0:
            return grid
        halton = qmc.Halton(d, scramble=True, seed=self.seed).random(self.n_random)
        return np.vstack([grid, self.radius * (2.0 * halton - 1.0)])


@dataclass
class AssumptionReport:
    checked_condition: str
    n_probes: int
    worst_violation: float
    worst_point: np.ndarray
    note: str = ""

    @property
    def passed(self):
        return bool(self.worst_violation <= 0.0)

    def to_dict(self):
        return {
            "checked_condition": self.checked_condition,
            "n_probes": self.n_probes,
            "worst_violation": float(self.worst_violation),
            "worst_point": np.asarray(self.worst_point).tolist(),
            "note": self.note,
            "pass": self.passed,
        }


def _worst(name, values, points, note=""):
    values = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.argmax(bad))
        return AssumptionReport(name, len(values), math.inf, points[i], note or "non-finite evaluation")
    i = int(np.argmax(values))
    return AssumptionReport(name, len(values), float(values[i]), points[i], note)


def check_assumption_A1(problem, probe_spec=ProbeSpec()):
    """Dissipativity, growth and polynomial-Lipschitz checks on probe points.

    Returns three reports for

        <x, b(x)> <= L1 - lam |x|^(r+2)
        |b(x)| <= L1 (1 + |x| ||grad b(x)||)
        |b(x) - b(y)| <= L1 (1 + |x|^r + |y|^r) |x - y|
    """
    c = problem.constants
    pts = probe_spec.points(problem.dim)
    bs = np.array([problem.drift(x) for x in pts])
    norms = np.linalg.norm(pts, axis=1)
    jn = np.array([jacobian_opnorm(problem.drift_jacobian(x)) for x in pts])

    dissip = np.einsum("ij,ij->i", pts, bs) - (c.L1 - c.lam * norms ** (c.r + 2))
    growth = np.linalg.norm(bs, axis=1) - c.L1 * (1.0 + norms * jn)

    # pairs: consecutive probe points plus each point against its mirror
    x = np.vstack([pts[:-1], pts])
    y = np.vstack([pts[1:], -pts])
    bx = np.vstack([bs[:-1], bs])
    by = np.vstack([bs[1:], np.array([problem.drift(p) for p in -pts])])
    nx, ny = np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1)
    lip = np.linalg.norm(bx - by, axis=1) - c.L1 * (1.0 + nx**c.r + ny**c.r) * np.linalg.norm(x - y, axis=1)
    pairs = np.stack([x, y], axis=1)

    return [
        _worst("A1_dissipativity", dissip, pts),
        _worst("A1_growth", growth, pts),
        _worst("A1_poly_lipschitz", lip, pairs),
    ]


def _unit_directions(d, n_extra=16, seed=0):
    eye = np.eye(d)
    if d == 1:
        return eye
    from scipy.stats import qmc

    g = qmc.Halton(d, scramble=True, seed=seed).random(n_extra) * 2.0 - 1.0
    g = g[np.linalg.norm(g, axis=1) > 1e-12]
    dirs = np.vstack([eye, g / np.linalg.norm(g, axis=1, keepdims=True)])
    return dirs


def check_assumption_A2(problem, probe_spec=ProbeSpec()):
    """``||sigma||, ||sigma^-1||, ||grad sigma||, ||grad^2 sigma|| <= L2`` on probes.

    Derivatives are central differences with step ``1e-4 (1 + |x|)``; the
    supremum over unit directions is taken over coordinate axes plus a few
    quasi-random directions (exact for ``d = 1``).
    """
    L2 = problem.constants.L2
    pts = probe_spec.points(problem.dim)
    dirs = _unit_directions(problem.dim, seed=probe_spec.seed)
    worst = -math.inf
    worst_pt = pts[0]
    for x in pts:
        s = problem.diffusion(x)
        if not np.all(np.isfinite(s)):
            return AssumptionReport("A2_bounds", len(pts), math.inf, x, "non-finite diffusion")
        cond = np.linalg.cond(s)
        if not np.isfinite(cond) or cond > 1e12:
            return AssumptionReport("A2_bounds", len(pts), math.inf, x, "diffusion numerically singular")
        h = 1e-4 * (1.0 + np.linalg.norm(x))
        vals = [jacobian_opnorm(s), jacobian_opnorm(np.linalg.inv(s))]
        for v in dirs:
            sp = problem.diffusion(x + h * v)
            sm = problem.diffusion(x - h * v)
            vals.append(jacobian_opnorm((sp - sm) / (2.0 * h)))
            vals.append(jacobian_opnorm((sp - 2.0 * s + sm) / h**2))
        v = max(vals) - L2
        if v > worst:
            worst, worst_pt = v, x
    return AssumptionReport("A2_bounds", len(pts), float(worst), worst_pt)


# ---------------------------------------------------------------------------
# built-in problems


@nb.njit
def _dw1_b(x, out):
    out[0] = x[0] - x[0] ** 3


@nb.njit
def _dw1_db(x, out):
    out[0, 0] = 1.0 - 3.0 * x[0] ** 2


@nb.njit
def _dw1_sigma(x, out):
    out[0, 0] = 2.0 + math.sin(x[0])


@nb.njit
def _dw1_dsigma(x, v, out):
    out[0, 0] = math.cos(x[0]) * v[0]


@nb.njit
def _unit_sigma(x, out):
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 1.0 if i == j else 0.0


@nb.njit
def _zero_dsigma(x, v, out):
    out[:, :] = 0.0


@nb.njit
def _ou_b(x, out):
    for i in range(x.shape[0]):
        out[i] = -x[i]


@nb.njit
def _ou_db(x, out):
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = -1.0 if i == j else 0.0


@nb.njit
def _dw3_b(x, out):
    r2 = 0.0
    for i in range(x.shape[0]):
        r2 += x[i] * x[i]
    for i in range(x.shape[0]):
        out[i] = x[i] - x[i] * r2


@nb.njit
def _dw3_db(x, out):
    d = x.shape[0]
    r2 = 0.0
    for i in range(d):
        r2 += x[i] * x[i]
    for i in range(d):
        for j in range(d):
            out[i, j] = -2.0 * x[i] * x[j]
        out[i, i] += 1.0 - r2


@nb.njit
def _dw3_sigma(x, out):
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 0.0
        out[i, i] = 1.0 + 0.2 * math.sin(x[i])


@nb.njit
def _dw3_dsigma(x, v, out):
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 0.0
        out[i, i] = 0.2 * math.cos(x[i]) * v[i]


_ADD = DiffusionKind.ADDITIVE
_MUL = DiffusionKind.MULTIPLICATIVE

BUILTIN_PROBLEMS = {
    "double-well-1d": lambda: SdeProblem(
        "double-well-1d", 1, _dw1_b, _dw1_db, _dw1_sigma, _dw1_dsigma, _MUL,
        DeclaredConstants(r=2.0, L1=1.5, lam=0.5, L2=3.0),
    ),
    "double-well-1d-additive": lambda: SdeProblem(
        "double-well-1d-additive", 1, _dw1_b, _dw1_db, _unit_sigma, _zero_dsigma, _ADD,
        DeclaredConstants(r=2.0, L1=1.5, lam=0.5, L2=1.0),
    ),
    "ou-1d": lambda: SdeProblem(
        "ou-1d", 1, _ou_b, _ou_db, _unit_sigma, _zero_dsigma, _ADD,
        DeclaredConstants(r=0.0, L1=1.0, lam=1.0, L2=1.0),
    ),
    "double-well-3d": lambda: SdeProblem(
        "double-well-3d", 3, _dw3_b, _dw3_db, _dw3_sigma, _dw3_dsigma, _MUL,
        DeclaredConstants(r=2.0, L1=3.0, lam=0.5, L2=1.25),
    ),
}


def builtin_problem(name):
    try:
        return BUILTIN_PROBLEMS[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(BUILTIN_PROBLEMS)}") from None
