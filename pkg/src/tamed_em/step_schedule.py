"""Decreasing step-size schedules and their grid times."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba as nb
import numpy as np

__all__ = [
    "StepSchedule",
    "ScheduleReport",
    "ScheduleError",
    "eta",
    "grid_time",
    "grid_times",
    "theta_min",
    "validate_schedule",
]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    """``kind`` is ``"polynomial"`` (``eta / n**gamma``) or ``"explicit"``."""

    kind: str
    eta: float = 0.0
    gamma: float = 1.0
    values: tuple = field(default=())

    def __post_init__(self):
        if self.kind == "polynomial":
            if not self.eta > 0:
                raise ScheduleError(f"eta must be positive, got {self.eta}")
            if not 0 < self.gamma <= 1:
                raise ScheduleError(f"gamma must lie in (0, 1], got {self.gamma}")
        elif self.kind == "explicit":
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
            if not self.values:
                raise ScheduleError("explicit schedule needs at least one value")
            if not all(v > 0 and math.isfinite(v) for v in self.values):
                raise ScheduleError("explicit step sizes must be positive and finite")
        else:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def polynomial(cls, eta, gamma):
        return cls("polynomial", eta=float(eta), gamma=float(gamma))

    @classmethod
    def explicit(cls, values):
        return cls("explicit", values=tuple(values))

    @classmethod
    def from_dict(cls, spec):
        spec = dict(spec)
        kind = spec.pop("kind", None)
        if kind == "polynomial":
            allowed = {"eta", "gamma"}
        elif kind == "explicit":
            allowed = {"values"}
        else:
            raise ScheduleError(f"unknown schedule kind {kind!r}")
        extra = set(spec) - allowed
        if extra:
            raise ScheduleError(f"unknown schedule keys {sorted(extra)}")
        return cls(kind, **spec)

    def to_dict(self):
        if self.kind == "polynomial":
            return {"kind": "polynomial", "eta": self.eta, "gamma": self.gamma}
        return {"kind": "explicit", "values": list(self.values)}

    @property
    def length(self):
        """Number of available steps (``None`` when unbounded)."""
        return len(self.values) if self.kind == "explicit" else None

    def etas(self, n):
        """Array ``[eta_1, ..., eta_n]``."""
        n = int(n)
        if n < 0:
            raise ScheduleError("n must be >= 0")
        if self.kind == "polynomial":
            k = np.arange(1, n + 1, dtype=np.float64)
            return self.eta / k**self.gamma
        if n > len(self.values):
            raise ScheduleError(f"explicit schedule has only {len(self.values)} steps, asked for {n}")
        return np.array(self.values[:n], dtype=np.float64)


def eta(schedule, n):
    n = int(n)
    if n < 1:
        raise ScheduleError(f"step index must be >= 1, got {n}")
    if schedule.kind == "polynomial":
        return schedule.eta / float(n) ** schedule.gamma
    if n > len(schedule.values):
        raise ScheduleError(f"explicit schedule has only {len(schedule.values)} steps, asked for {n}")
    return schedule.values[n - 1]


@nb.njit(cache=True)
def _neumaier_prefix(a):
    out = np.empty(a.shape[0] + 1)
    s = 0.0
    c = 0.0
    out[0] = 0.0
    for i in range(a.shape[0]):
        x = a[i]
        t = s + x
        if abs(s) >= abs(x):
            c += (s - t) + x
        else:
            c += (x - t) + s
        s = t
        out[i + 1] = s + c
    return out


@lru_cache(maxsize=32)
def _cached_grid(schedule, n):
    out = _neumaier_prefix(schedule.etas(n))
    out.flags.writeable = False
    return out


def grid_times(schedule, n):
    """``[t_0, ..., t_n]`` with compensated (Neumaier) summation."""
    return _cached_grid(schedule, int(n))


def grid_time(schedule, n):
    n = int(n)
    if n < 0:
        raise ScheduleError("n must be >= 0")
    if n == 0:
        return 0.0
    return float(grid_times(schedule, n)[n])


def _first_increase(etas):
    bad = np.nonzero(etas[1:] > etas[:-1])[0]
    return int(bad[0]) + 2 if bad.size else None


def theta_min(schedule, N):
    """Smallest ``theta`` with ``eta_{n-1} - eta_n <= theta eta_n**2`` for ``2 <= n <= N``."""
    N = int(N)
    if N < 2:
        raise ScheduleError("N must be >= 2")
    e = schedule.etas(N)
    first = _first_increase(e)
    if first is not None:
        raise ScheduleError(f"schedule increases at step n={first}")
    # (eta_{n-1}/eta_n - 1)/eta_n is exact for the textbook cases (e.g. 20 at n=2)
    return float(np.max((e[:-1] / e[1:] - 1.0) / e[1:]))


@dataclass
class ScheduleReport:
    n_checked: int
    monotone_ok: bool
    vanishing_ok: bool
    divergence_ok: bool
    theta_min: float
    theta: float
    heuristic: bool
    first_violation: int | None = None

    @property
    def passed(self):
        return bool(
            self.monotone_ok
            and self.vanishing_ok
            and self.divergence_ok
            and self.theta_min <= self.theta
        )

    def to_dict(self):
        return {
            "n_checked": self.n_checked,
            "monotone_ok": self.monotone_ok,
            "vanishing_ok": self.vanishing_ok,
            "divergence_ok": self.divergence_ok,
            "theta_min": self.theta_min,
            "theta": self.theta,
            "heuristic": self.heuristic,
            "first_violation": self.first_violation,
            "pass": self.passed,
        }


def validate_schedule(schedule, N, theta, horizon):
    """Check the step-size conditions on the prefix of length ``N``.

    The polynomial family has ``eta_n -> 0`` and a divergent sum by
    construction; for explicit lists both are replaced by proxies
    (``eta_N < eta_1`` and ``t_N >= horizon``) and the report is flagged
    heuristic.
    """
    N = int(N)
    if N < 2:
        raise ScheduleError("N must be >= 2")
    if schedule.kind == "explicit":
        N = min(N, len(schedule.values))
    e = schedule.etas(N)
    first = _first_increase(e)
    monotone = first is None
    if schedule.kind == "polynomial":
        vanishing = divergence = True
        heuristic = False
    else:
        vanishing = bool(e[-1] < e[0])
        divergence = bool(grid_time(schedule, N) >= horizon)
        heuristic = True
    th = theta_min(schedule, N) if monotone and N >= 2 else math.inf
    return ScheduleReport(
        n_checked=N,
        monotone_ok=monotone,
        vanishing_ok=vanishing,
        divergence_ok=divergence,
        theta_min=th,
        theta=float(theta),
        heuristic=heuristic,
        first_violation=first,
    )
