"""Tamed Euler-Maruyama with decreasing steps for SDEs with superlinear drift."""

from .distances import (
    PathEnsemble,
    lyapunov_moment,
    sliced_wasserstein1,
    tv_histogram,
    wasserstein1_1d,
)
from .integrator import (
    DivergenceError,
    bel_gradient,
    reference_ensemble,
    set_threads,
    simulate_ensemble,
    simulate_path,
    tamed_step,
)
from .probes import lemma_a1_sums, lemma_a2_mc, rate_fit
from .sde_model import DeclaredConstants, SdeProblem, builtin_problem, lyapunov_V, make_problem
from .step_schedule import StepSchedule, grid_time, theta_min, validate_schedule

__version__ = "0.1.0"

__all__ = [
    "DeclaredConstants",
    "DivergenceError",
    "PathEnsemble",
    "SdeProblem",
    "StepSchedule",
    "bel_gradient",
    "builtin_problem",
    "grid_time",
    "lemma_a1_sums",
    "lemma_a2_mc",
    "lyapunov_V",
    "lyapunov_moment",
    "make_problem",
    "rate_fit",
    "reference_ensemble",
    "set_threads",
    "simulate_ensemble",
    "simulate_path",
    "sliced_wasserstein1",
    "tamed_step",
    "theta_min",
    "tv_histogram",
    "validate_schedule",
    "wasserstein1_1d",
]
