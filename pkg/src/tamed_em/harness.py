"""Experiment orchestration: configs, convergence and moment runs, reports.

A run is a pure function of its :class:`ExperimentConfig`.  Reports carry
the config and its hash, contain no timings or host details, and serialise
to byte-identical JSON/CSV for a given config whatever the thread count.

Config files are TOML with the sections ``[problem]``, ``[schedule]``,
``[experiment]`` (with sub-tables ``moment``, ``one_step``, ``bel`` and
``lemmas``), ``[distances]`` and ``[tolerances]``.  Every key has a default
(see the dataclasses below); unknown keys are rejected.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import tomli
from scipy import optimize, stats

from . import distances as dist
from .integrator import (
    coupled_one_step_ensemble,
    bel_gradient,
    fd_gradient,
    reference_ensemble,
    simulate_ensemble,
)
from .probes import lemma_a1_sums, lemma_a2_mc, rate_fit
from .sde_model import (
    BUILTIN_PROBLEMS,
    DiffusionKind,
    ProbeSpec,
    builtin_problem,
    check_assumption_A1,
    check_assumption_A2,
    lyapunov_values,
)
from .step_schedule import ScheduleError, StepSchedule, grid_times, validate_schedule

__all__ = [
    "ConfigError",
    "AssumptionError",
    "ExperimentConfig",
    "DistanceRecord",
    "DistanceSeries",
    "ConvergenceReport",
    "MomentReport",
    "OneStepReport",
    "BelReport",
    "LemmaReport",
    "ScheduleCheckReport",
    "AssumptionCheckReport",
    "SimulationReport",
    "load_config",
    "resolve_checkpoints",
    "run_convergence",
    "run_moment_experiment",
    "run_one_step_probe",
    "run_bel_check",
    "run_lemma_probes",
    "run_schedule_check",
    "run_assumption_check",
    "run_simulation",
    "emit_report",
]


class ConfigError(ValueError):
    pass


class AssumptionError(RuntimeError):
    """A problem failed its assumption checks; ``reports`` holds the details."""

    def __init__(self, reports):
        self.reports = list(reports)
        failed = ", ".join(r.checked_condition for r in self.reports if not r.passed)
        super().__init__(f"assumption checks failed: {failed}")


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class ProblemConfig:
    id: str = "double-well-1d"
    x0: tuple = (0.0,)
    check_assumptions: bool = True
    probe_radius: float = 10.0


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "polynomial"
    eta: float = 0.2
    gamma: float = 0.6
    values: tuple = ()
    # used by validate-schedule only
    theta: float = 20.0
    n_check: int = 10000
    horizon: float = 10.0

    def build(self):
        if self.kind == "polynomial":
            return StepSchedule.polynomial(self.eta, self.gamma)
        if self.kind == "explicit":
            return StepSchedule.explicit(self.values)
        raise ConfigError(f"schedule.kind must be 'polynomial' or 'explicit', got {self.kind!r}")


@dataclass(frozen=True)
class MomentConfig:
    m: int = 10000
    p: float = 3.0
    checkpoint_times: tuple = (0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0)


@dataclass(frozen=True)
class OneStepConfig:
    x: tuple = (0.5,)
    log2_inv_eta: tuple = (8, 9, 10, 11, 12, 13)
    n_sub: int = 64
    m: int = 20000


@dataclass(frozen=True)
class BelConfig:
    t: float = 0.5
    v: tuple = (1.0,)
    m: int = 100000
    eta_ref: float = 1e-3
    fd_h: float = 1e-2


@dataclass(frozen=True)
class LemmaConfig:
    beta: float = 0.25
    c: float = 0.5
    n_values: tuple = (1000, 10000, 100000)
    mu: tuple = (1.0,)
    sigma: tuple = (1.0,)  # row-major d x d
    etas: tuple = (0.01, 0.005, 0.0025)
    m: int = 1000000


@dataclass(frozen=True)
class ExperimentSettings:
    alpha: float = 0.25
    m: int = 20000
    n_steps: int = 0  # 0: up to the last checkpoint
    checkpoints: tuple = ()  # step indices; overrides checkpoint_times
    checkpoint_times: tuple = (2.0, 3.0, 4.0, 6.0, 8.0)
    eta_ref: float = 1e-3
    ref_alpha: float = 0.49
    master_seed: int = 0
    burn_in: float = 2.0
    self_check: bool = True
    dump_ensembles: bool = False
    moment: MomentConfig = field(default_factory=MomentConfig)
    one_step: OneStepConfig = field(default_factory=OneStepConfig)
    bel: BelConfig = field(default_factory=BelConfig)
    lemmas: LemmaConfig = field(default_factory=LemmaConfig)


@dataclass(frozen=True)
class DistanceConfig:
    projections: int = 64
    bins: int = 0  # 0: ceil(M^(1/3)) clamped to [8, 256]
    projection_seed: int = 0


@dataclass(frozen=True)
class ToleranceConfig:
    slope: float = 0.1
    r2: float = 0.8
    self_consistency: float = 0.25
    noise_floor: float = 2.0
    moment_residual: float = 0.2
    one_step_slope: float = 0.3
    lemma_ratio: float = 3.0
    gaussian_ratio: float = 2.0
    bel_sigmas: float = 3.0


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        items = value if isinstance(value, (list, tuple)) else [value]
        out = []
        for i, v in enumerate(items):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}[{i}] must be a number, got {v!r}")
            out.append(float(v))
        return tuple(out)
    raise ConfigError(f"{where}: unsupported type")  # pragma: no cover


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        path = f"{where}.{name}"
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


_SECTIONS = {
    "problem": ProblemConfig,
    "schedule": ScheduleConfig,
    "experiment": ExperimentSettings,
    "distances": DistanceConfig,
    "tolerances": ToleranceConfig,
}


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        # tuple fields are coerced to float on load; match that here
        return [float(v) for v in obj]
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    distances: DistanceConfig = field(default_factory=DistanceConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)

    def __post_init__(self):
        p, e = self.problem, self.experiment
        if p.id not in BUILTIN_PROBLEMS:
            raise ConfigError(f"unknown problem id {p.id!r}; known: {', '.join(sorted(BUILTIN_PROBLEMS))}")
        if not 0 < e.alpha < 0.5:
            raise ConfigError(f"experiment.alpha must lie in (0, 1/2), got {e.alpha}")
        if not 0 < e.ref_alpha < 0.5:
            raise ConfigError(f"experiment.ref_alpha must lie in (0, 1/2), got {e.ref_alpha}")
        if e.m < 100:
            raise ConfigError(f"experiment.m must be >= 100, got {e.m}")
        if not e.eta_ref > 0:
            raise ConfigError("experiment.eta_ref must be positive")
        if not 0 <= e.master_seed < 2**64:
            raise ConfigError("experiment.master_seed must be an unsigned 64-bit integer")
        if e.n_steps < 0:
            raise ConfigError("experiment.n_steps must be >= 0")
        if self.distances.projections < 1:
            raise ConfigError("distances.projections must be >= 1")
        if self.distances.bins < 0:
            raise ConfigError("distances.bins must be >= 0")
        if len(p.x0) not in (1, self.dim):
            raise ConfigError(f"problem.x0 has {len(p.x0)} entries, problem dimension is {self.dim}")
        if any(c != int(c) or c < 0 for c in e.checkpoints):
            raise ConfigError("experiment.checkpoints must be non-negative step indices")
        try:
            self.schedule.build()
        except ScheduleError as exc:
            raise ConfigError(f"[schedule]: {exc}") from exc

    @property
    def dim(self):
        return builtin_problem(self.problem.id).dim

    @property
    def x0(self):
        x = np.asarray(self.problem.x0, dtype=np.float64)
        return np.full(self.dim, x[0]) if x.shape[0] == 1 else x

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a table")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        return cls(**{k: _build(_SECTIONS[k], v, k) for k, v in data.items()})

    def to_dict(self):
        return _plain(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, overrides):
        data = self.to_dict()
        apply_overrides(data, overrides)
        return ExperimentConfig.from_dict(data)


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply ``section.key=value`` strings to a raw config dict (last wins)."""
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {key!r} must name a section, e.g. experiment.m")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def load_config(path=None, overrides=()):
    """Read a TOML config (or start from defaults when ``path`` is None)."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            with path.open("rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    apply_overrides(data, overrides)
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# shared pieces


def _grid_until(schedule, t_max):
    n = 64
    while True:
        if schedule.length is not None:
            n = min(n, schedule.length)
        t = grid_times(schedule, n)
        if t[-1] >= t_max or n == schedule.length:
            return t
        n *= 2


def resolve_checkpoints(schedule, times=(), steps=()):
    """Step indices for the requested checkpoints.

    Explicit ``steps`` win; otherwise each time maps to the grid index whose
    ``t_n`` is nearest (at least 1).  Duplicates are an error.
    """
    if steps:
        ck = [int(s) for s in steps]
    else:
        if not times:
            raise ConfigError("no checkpoints requested")
        t = _grid_until(schedule, max(times))
        if t[-1] < max(times) - 1e-12:
            raise ConfigError(f"schedule reaches only t = {t[-1]:.6g} < {max(times)}")
        ck = [max(1, int(np.argmin(np.abs(t - T)))) for T in times]
    if any(b <= a for a, b in zip(ck, ck[1:])):
        raise ConfigError(f"checkpoints must be strictly increasing, got {ck}")
    if schedule.length is not None and ck[-1] > schedule.length:
        raise ConfigError(f"checkpoint {ck[-1]} beyond the explicit schedule ({schedule.length} steps)")
    return ck


def _checkpoints(config):
    schedule = config.schedule.build()
    e = config.experiment
    ck = resolve_checkpoints(schedule, e.checkpoint_times, e.checkpoints)
    if e.n_steps and ck[-1] > e.n_steps:
        raise ConfigError(f"checkpoint {ck[-1]} exceeds experiment.n_steps = {e.n_steps}")
    return schedule, ck


def _assumptions(problem, config):
    spec = ProbeSpec(radius=config.problem.probe_radius)
    return list(check_assumption_A1(problem, spec)) + [check_assumption_A2(problem, spec)]


def _clean(v):
    if is_dataclass(v) and not isinstance(v, type):
        if hasattr(v, "to_dict"):
            return _clean(v.to_dict())
        return _clean(asdict(v))
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


class _Report:
    kind = "report"

    @property
    def passed(self):
        return all(v for v in self.flags.values() if v is not None)

    def summary_lines(self):
        return [f"{'PASS' if ok else 'FAIL'} {name}" for name, ok in self.flags.items() if ok is not None]

    def csv_table(self):
        """``(filename, header, rows)`` for the CSV output, or ``None``."""
        return None

    def to_dict(self):
        body = {k: v for k, v in vars(self).items() if k not in ("config",)}
        out = {"kind": self.kind, "pass": self.passed, "flags": self.flags}
        if getattr(self, "config", None) is not None:
            out["config"] = self.config.to_dict()
            out["config_hash"] = self.config.config_hash()
        out.update(body)
        return _clean(out)


def _w1(a, b, config):
    if a.shape[1] == 1:
        return dist.wasserstein1_1d(a, b)
    return dist.sliced_wasserstein1(a, b, config.distances.projections, config.distances.projection_seed)


# ---------------------------------------------------------------------------
# convergence


@dataclass(frozen=True)
class DistanceRecord:
    n: int
    t_n: float
    eta_n: float
    w1: float
    w1_se: float
    tv: float
    ref_gap: float
    in_fit: bool


@dataclass
class DistanceSeries:
    records: list

    def __post_init__(self):
        t = [r.t_n for r in self.records]
        e = [r.eta_n for r in self.records]
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("t_n must be strictly increasing")
        if any(b > a for a, b in zip(e, e[1:])):
            raise ValueError("eta_n must be non-increasing")

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])


CSV_HEADER = ("n", "t_n", "eta_n", "w1", "w1_se", "tv")


@dataclass
class ConvergenceReport(_Report):
    config: ExperimentConfig
    series: DistanceSeries
    w1_fit: object
    tv_fit: object
    tv_spearman: float
    burn_in_slope_shift: float
    envelope_constant: float
    moment_max: float
    moment_saturated: bool
    self_consistency_gap: float
    diverged: int
    assumptions: list
    flags: dict
    kind = "convergence"

    def csv_table(self):
        rows = [(r.n, r.t_n, r.eta_n, r.w1, r.w1_se, r.tv) for r in self.series.records]
        return "distances.csv", CSV_HEADER, rows


def _fit_subset(eta, w, mask):
    if np.count_nonzero(mask) < 3:
        return None
    return rate_fit(np.column_stack([eta[mask], w[mask]]))


def run_convergence(config: ExperimentConfig, *, out_dir=None):
    """Variable-step ensemble against a fine constant-step reference.

    For every checkpoint ``n`` the distance between ``M`` variable-step
    endpoints and ``M`` independent reference endpoints at the same ``t_n``
    is estimated; ``log W1`` is then regressed on ``log eta_n`` over the
    checkpoints past the burn-in that clear the noise floor.

    Noise floor: the W1 standard-error proxy is half the spread of W1 over
    four quarter-ensembles.  A checkpoint is dropped from the fit when its
    W1 does not exceed the reference self-consistency gap (W1 between the
    reference at ``eta_ref`` and at ``eta_ref / 2``) by more than
    ``noise_floor`` proxies.
    """
    problem = builtin_problem(config.problem.id)
    assumptions = []
    if config.problem.check_assumptions:
        assumptions = _assumptions(problem, config)
        if not all(r.passed for r in assumptions):
            raise AssumptionError(assumptions)
    schedule, ck = _checkpoints(config)
    e, tol = config.experiment, config.tolerances
    x0 = config.x0

    var = simulate_ensemble(problem, schedule, e.alpha, x0, ck, e.m, e.master_seed)
    times = var.times
    ref = reference_ensemble(problem, times, e.eta_ref, x0, e.m, e.master_seed, e.ref_alpha)
    ref2 = None
    if e.self_check:
        ref2 = reference_ensemble(problem, times, e.eta_ref / 2, x0, e.m, e.master_seed, e.ref_alpha,
                                  path_offset=e.m)
    diverged = var.n_diverged + ref.n_diverged + (ref2.n_diverged if ref2 is not None else 0)

    etas = schedule.etas(ck[-1])[np.asarray(ck) - 1]
    bins = config.distances.bins or None
    w1 = np.empty(len(ck))
    se = np.empty(len(ck))
    tv = np.empty(len(ck))
    gap = np.zeros(len(ck))
    moments = []
    saturated = False
    for j in range(len(ck)):
        a = var.finite(j)
        b = ref.finite(j)
        k = min(len(a), len(b))
        a, b = a[:k], b[:k]
        w1[j] = _w1(a, b, config)
        q = k // 4
        quarters = [_w1(a[i * q : (i + 1) * q], b[i * q : (i + 1) * q], config) for i in range(4)]
        se[j] = 0.5 * (max(quarters) - min(quarters))
        tv[j] = dist.tv_histogram(a, b, bins) if a.shape[1] <= 3 else math.nan
        if ref2 is not None:
            c = ref2.finite(j)
            kk = min(len(b), len(c))
            gap[j] = _w1(b[:kk], c[:kk], config)
        m, _, sat = dist.lyapunov_moment(a, 3.0)
        moments.append(m)
        saturated |= sat
        if e.dump_ensembles and out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            dist.write_binary(Path(out_dir) / f"ensemble_{ck[j]}.bin", a)

    # one step of slack so a checkpoint placed "at" the burn-in time counts
    past = times >= e.burn_in - etas
    resolved = w1 > gap + tol.noise_floor * se
    in_fit = past & resolved
    w1_fit = _fit_subset(etas, w1, in_fit)
    tv_ok = np.isfinite(tv) & (tv > 0)
    tv_fit = _fit_subset(etas, tv, past & tv_ok)
    if np.count_nonzero(past & tv_ok) >= 3:
        rho = float(stats.spearmanr(etas[past & tv_ok], tv[past & tv_ok]).statistic)
    else:
        rho = math.nan
    late = in_fit & (times >= e.burn_in + 1.0 - etas)
    late_fit = _fit_subset(etas, w1, late)
    shift = abs(late_fit.slope - w1_fit.slope) if (late_fit and w1_fit) else math.nan
    envelope = float(np.max(w1[in_fit] / etas[in_fit] ** e.alpha)) if in_fit.any() else math.nan

    if e.self_check and in_fit.any():
        sc_ok = bool(np.max(gap[past]) <= tol.self_consistency * np.min(w1[in_fit]))
    elif e.self_check:
        sc_ok = False
    else:
        sc_ok = None
    flags = {
        "w1_slope": bool(w1_fit is not None and w1_fit.slope >= e.alpha - tol.slope),
        "w1_r2": bool(w1_fit is not None and w1_fit.r_squared >= tol.r2),
        "tv_trend": bool(rho > 0),
        "reference_self_consistency": sc_ok,
        "no_divergence": diverged == 0,
        "moments_finite": bool(not saturated and np.all(np.isfinite(moments))),
    }
    records = [
        DistanceRecord(int(ck[j]), float(times[j]), float(etas[j]), float(w1[j]), float(se[j]),
                       float(tv[j]), float(gap[j]), bool(in_fit[j]))
        for j in range(len(ck))
    ]
    return ConvergenceReport(
        config=config,
        series=DistanceSeries(records),
        w1_fit=w1_fit,
        tv_fit=tv_fit,
        tv_spearman=rho,
        burn_in_slope_shift=shift,
        envelope_constant=envelope,
        moment_max=float(max(moments)),
        moment_saturated=bool(saturated),
        self_consistency_gap=float(np.max(gap[past])) if past.any() else math.nan,
        diverged=int(diverged),
        assumptions=[r.to_dict() for r in assumptions],
        flags=flags,
    )


# ---------------------------------------------------------------------------
# moments


@dataclass
class MomentReport(_Report):
    config: ExperimentConfig
    steps: list
    times: list
    moments: list
    standard_errors: list
    v0_power: float
    lambda_hat: float
    c_hat: float
    max_relative_residual: float
    saturated: bool
    diverged: int
    flags: dict
    kind = "moment"

    def csv_table(self):
        rows = [(n, t, m, s) for n, t, m, s in zip(self.steps, self.times, self.moments, self.standard_errors)]
        return "moments.csv", ("n", "t_n", "moment", "moment_se"), rows


def fit_moment_decay(t, m, v0p):
    """Fit ``m(t) ~ exp(-lam t) v0p + C`` with ``lam > 0``.

    For fixed ``lam`` the best ``C`` (relative least squares) is explicit,
    so only ``log lam`` is searched: a coarse grid, then a bounded Brent
    refinement around the best grid point.  Returns ``(lam, C, residuals)``
    with relative residuals ``(fit - m) / m``.
    """
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    w = 1.0 / m**2

    def parts(loglam):
        a = np.exp(-np.exp(loglam) * t) * v0p
        C = float(np.sum(w * (m - a)) / np.sum(w))
        return a, C

    def objective(loglam):
        a, C = parts(loglam)
        return float(np.sum(((a + C - m) / m) ** 2))

    grid = np.linspace(math.log(1e-6), math.log(1e3), 400)
    vals = [objective(g) for g in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    best = res.x if res.fun <= vals[i] else grid[i]
    a, C = parts(best)
    return float(math.exp(best)), C, (a + C - m) / m


def run_moment_experiment(config: ExperimentConfig):
    """Track the Lyapunov moment ``E V(Y)^p`` of the tamed chain over time."""
    problem = builtin_problem(config.problem.id)
    schedule = config.schedule.build()
    e, mc = config.experiment, config.experiment.moment
    ck = resolve_checkpoints(schedule, mc.checkpoint_times)
    run = simulate_ensemble(problem, schedule, e.alpha, config.x0, ck, mc.m, e.master_seed)
    moments, ses = [], []
    saturated = False
    for j in range(len(ck)):
        a = run.finite(j)
        vals, sat = lyapunov_values(a, mc.p)
        saturated |= bool(sat.any())
        moments.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(len(vals))))
    v0p = float(lyapunov_values(config.x0[None, :], mc.p)[0][0])
    ok_series = not saturated and all(math.isfinite(v) for v in moments)
    if ok_series:
        lam, C, resid = fit_moment_decay(run.times, moments, v0p)
        worst = float(np.max(np.abs(resid)))
    else:
        lam, C, worst = math.nan, math.nan, math.inf
    flags = {
        "moment_bounded": bool(ok_series),
        "moment_fit": bool(ok_series and lam > 0 and worst <= config.tolerances.moment_residual),
        "no_divergence": run.n_diverged == 0,
    }
    return MomentReport(
        config=config,
        steps=[int(c) for c in ck],
        times=[float(t) for t in run.times],
        moments=moments,
        standard_errors=ses,
        v0_power=v0p,
        lambda_hat=lam,
        c_hat=C,
        max_relative_residual=worst,
        saturated=saturated,
        diverged=run.n_diverged,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# one-step, BEL, lemma, schedule and assumption checks


@dataclass
class OneStepReport(_Report):
    config: ExperimentConfig
    x: list
    etas: list
    fourth_moments: list
    fit: object
    expected_slope: float
    flags: dict
    kind = "one_step"

    def csv_table(self):
        return "one_step.csv", ("eta", "fourth_moment"), list(zip(self.etas, self.fourth_moments))


def run_one_step_probe(config: ExperimentConfig):
    """Slope of ``log E|X - Y|^4`` against ``log eta`` for a single step.

    The expected order is ``4 + 4 alpha`` for additive noise and ``4``
    otherwise.  The additive order comes from the taming term alone, so
    the start point must have ``b(x) != 0`` and ``eta^alpha ||grad b||``
    small over the eta range.
    """
    problem = builtin_problem(config.problem.id)
    e, os_ = config.experiment, config.experiment.one_step
    x = np.asarray(os_.x, dtype=np.float64)
    if x.shape[0] == 1 and problem.dim > 1:
        x = np.full(problem.dim, x[0])
    etas = [2.0 ** -int(k) for k in os_.log2_inv_eta]
    moments = []
    for eta in etas:
        fine, one = coupled_one_step_ensemble(problem, x, eta, e.alpha, os_.n_sub, os_.m, e.master_seed)
        moments.append(float(np.mean(np.sum((fine - one) ** 2, axis=1) ** 2)))
    fit = rate_fit(list(zip(etas, moments)))
    expected = 4.0 + 4.0 * e.alpha if problem.diffusion_kind == DiffusionKind.ADDITIVE else 4.0
    flags = {"one_step_slope": bool(abs(fit.slope - expected) <= config.tolerances.one_step_slope)}
    return OneStepReport(config, x.tolist(), etas, moments, fit, expected, flags)


def ou_gradient_sin(t, x0, v=1.0):
    """Exact derivative of ``E sin(X_t)`` in ``x0`` for ``dX = -X dt + dB``."""
    return v * math.exp(-t) * math.cos(x0 * math.exp(-t)) * math.exp(-(1.0 - math.exp(-2.0 * t)) / 4.0)


def _sin_first(X):
    return np.sin(X[:, 0])


@dataclass
class BelReport(_Report):
    config: ExperimentConfig
    estimate: float
    standard_error: float
    fd_estimate: float
    fd_standard_error: float
    exact: float | None
    flags: dict
    kind = "bel"


def run_bel_check(config: ExperimentConfig):
    """BEL gradient of ``E sin(X_t^(1))`` against finite differences (and the
    closed form on ``ou-1d``)."""
    problem = builtin_problem(config.problem.id)
    e, bc = config.experiment, config.experiment.bel
    k = config.tolerances.bel_sigmas
    x0 = config.x0
    v = np.asarray(bc.v, dtype=np.float64)
    if v.shape[0] == 1 and problem.dim > 1:
        v = np.full(problem.dim, v[0])
    est, se = bel_gradient(problem, _sin_first, bc.t, x0, v, bc.m, bc.eta_ref, e.master_seed)
    fd, fd_se = fd_gradient(problem, _sin_first, bc.t, x0, v, bc.m, bc.eta_ref, e.master_seed, h=bc.fd_h)
    flags = {"bel_vs_fd": bool(abs(est - fd) <= k * math.hypot(se, fd_se))}
    exact = None
    if config.problem.id == "ou-1d":
        exact = ou_gradient_sin(bc.t, float(x0[0]), float(v[0]))
        flags["bel_vs_exact"] = bool(abs(est - exact) <= k * se)
    return BelReport(config, est, se, fd, fd_se, exact, flags)


@dataclass
class LemmaReport(_Report):
    config: ExperimentConfig
    step_sums: list
    ratio_spread: list
    gaussian: list
    gaussian_spread: float
    flags: dict
    kind = "lemmas"


def _spread(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
        return math.inf
    return float(v.max() / v.min())


def run_lemma_probes(config: ExperimentConfig):
    """Ratio stability of the step sums and of the Gaussian tail constant."""
    lc, tol = config.experiment.lemmas, config.tolerances
    schedule = config.schedule.build()
    sums = [lemma_a1_sums(schedule, lc.beta, lc.c, int(n)) for n in lc.n_values]
    spreads = [_spread([getattr(s, f"ratio{i}") for s in sums]) for i in (1, 2, 3)]
    d = len(lc.mu)
    if len(lc.sigma) != d * d:
        raise ConfigError(f"experiment.lemmas.sigma needs {d * d} entries for a {d}-dimensional mu")
    Sigma = np.asarray(lc.sigma).reshape(d, d)
    gauss = [lemma_a2_mc(np.asarray(lc.mu), Sigma, eta, lc.m, config.experiment.master_seed)
             for eta in lc.etas]
    g_spread = _spread([g.C_outside for g in gauss])
    flags = {
        "step_sum_ratios": all(s <= tol.lemma_ratio for s in spreads),
        "gaussian_tail_constant": g_spread <= tol.gaussian_ratio,
    }
    return LemmaReport(config, [asdict(s) for s in sums], spreads, [asdict(g) for g in gauss], g_spread, flags)


@dataclass
class ScheduleCheckReport(_Report):
    config: ExperimentConfig
    schedule_report: dict
    flags: dict
    kind = "schedule"


def run_schedule_check(config: ExperimentConfig):
    sc = config.schedule
    rep = validate_schedule(sc.build(), sc.n_check, sc.theta, sc.horizon)
    flags = {
        "monotone": rep.monotone_ok,
        "vanishing": rep.vanishing_ok,
        "divergent_sum": rep.divergence_ok,
        "theta": bool(rep.theta_min <= rep.theta),
    }
    return ScheduleCheckReport(config, rep.to_dict(), flags)


@dataclass
class AssumptionCheckReport(_Report):
    config: ExperimentConfig
    reports: list
    flags: dict
    kind = "assumptions"


def run_assumption_check(config: ExperimentConfig):
    problem = builtin_problem(config.problem.id)
    reps = _assumptions(problem, config)
    return AssumptionCheckReport(config, [r.to_dict() for r in reps],
                                 {r.checked_condition: r.passed for r in reps})


@dataclass
class SimulationReport(_Report):
    config: ExperimentConfig
    steps: list
    times: list
    means: list
    diverged: int
    flags: dict
    kind = "simulation"

    def csv_table(self):
        d = len(self.means[0]) if self.means else 0
        header = ("n", "t_n") + tuple(f"mean_x{i}" for i in range(d))
        return "means.csv", header, [(n, t, *m) for n, t, m in zip(self.steps, self.times, self.means)]


def run_simulation(config: ExperimentConfig, out_dir=None, fmt="json"):
    """Variable-step ensemble only; endpoint samples go to ``out_dir``."""
    problem = builtin_problem(config.problem.id)
    schedule, ck = _checkpoints(config)
    e = config.experiment
    run = simulate_ensemble(problem, schedule, e.alpha, config.x0, ck, e.m, e.master_seed)
    means = []
    for j, n in enumerate(ck):
        a = run.finite(j)
        means.append(a.mean(axis=0).tolist())
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            if fmt in ("json", "both") or e.dump_ensembles:
                dist.write_binary(Path(out_dir) / f"ensemble_{n}.bin", a)
            if fmt in ("csv", "both"):
                dist.write_csv(Path(out_dir) / f"ensemble_{n}.csv", a)
    return SimulationReport(config, [int(c) for c in ck], [float(t) for t in run.times], means,
                            run.n_diverged, {"no_divergence": run.n_diverged == 0})


# ---------------------------------------------------------------------------
# output


def emit_report(report, path, fmt="both"):
    """Write ``report.json`` and/or the report's CSV table into directory ``path``.

    Floats are written in shortest round-trip form.  Returns the written paths.
    """
    if fmt not in ("json", "csv", "both"):
        raise ValueError(f"format must be json, csv or both, got {fmt!r}")
    out = Path(path)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt in ("json", "both"):
            p = out / "report.json"
            p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            written.append(p)
        table = report.csv_table()
        if fmt in ("csv", "both") and table is not None:
            name, header, rows = table
            p = out / name
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in rows:
                    w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
            written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return written
