import math

import numba as nb
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tamed_em import integrator as I
from tamed_em.integrator import (
    DivergenceError,
    NoiseIncrement,
    PathState,
    bel_gradient,
    coupled_one_step,
    coupled_one_step_ensemble,
    fd_gradient,
    reference_ensemble,
    simulate_ensemble,
    simulate_path,
    simulate_reference,
    simulate_tangent,
    tamed_step,
    taming_factor,
    tangent_ensemble,
)
from tamed_em.rng import Stream, path_normals
from tamed_em.sde_model import DeclaredConstants, builtin_problem, lyapunov_V, make_problem
from tamed_em.step_schedule import StepSchedule, grid_time

OU = builtin_problem("ou-1d")
DW = builtin_problem("double-well-1d")
DW3 = builtin_problem("double-well-3d")
K = DeclaredConstants(0.0, 1.0, 1.0, 1.0)


def _brownian(d=1):
    @nb.njit
    def b(x, out):
        out[:] = 0.0

    @nb.njit
    def db(x, out):
        out[:, :] = 0.0

    @nb.njit
    def sig(x, out):
        out[:, :] = 0.0
        for i in range(x.shape[0]):
            out[i, i] = 1.0

    @nb.njit
    def dsig(x, v, out):
        out[:, :] = 0.0

    return make_problem("brownian", d, b, db, sig, K, diffusion_derivative=dsig, diffusion_kind="additive")


BM = _brownian()


# ---------------------------------------------------------------- single step


def test_taming_factor_examples():
    assert taming_factor(0.3, 0.25, 0.0) == 1.0
    assert taming_factor(1e-4, 0.25, 10.0) == pytest.approx(0.5, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-8, 10), st.floats(0.01, 0.49), st.floats(0, 1e6), st.floats(0, 1e6))
def test_taming_factor_monotone(eta, alpha, g1, g2):
    lo, hi = sorted((g1, g2))
    assert 0 < taming_factor(eta, alpha, hi) <= taming_factor(eta, alpha, lo) <= 1


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1), st.floats(1e-6, 1), st.floats(0.01, 0.49), st.floats(0, 1e4))
def test_taming_factor_monotone_in_eta(e1, e2, alpha, g):
    lo, hi = sorted((e1, e2))
    assert taming_factor(hi, alpha, g) <= taming_factor(lo, alpha, g)


def test_taming_factor_validation():
    with pytest.raises(ValueError):
        taming_factor(0.0, 0.25, 1.0)
    with pytest.raises(ValueError):
        taming_factor(0.1, 0.5, 1.0)


def test_tamed_step_linear_drift_example():
    s = tamed_step(OU, PathState(np.array([1.0])), 0.1, 0.25, NoiseIncrement(np.zeros(1), 0.1))
    factor = 1 / (1 + 0.1**0.25)
    assert s.position[0] == pytest.approx(1 - 0.1 * factor, rel=1e-15)
    assert s.position[0] == pytest.approx(0.93599, abs=1e-5)
    assert s.time == 0.1 and s.step_index == 1


def test_tamed_step_pure_diffusion():
    dB = np.array([0.37])
    s = tamed_step(BM, PathState(np.array([2.0]), time=0.5), 0.2, 0.25, NoiseIncrement(dB, 0.2))
    assert s.position[0] == 2.37 and s.time == 0.5 + 0.2


def test_tamed_step_noise_must_match_eta():
    with pytest.raises(ValueError):
        tamed_step(OU, PathState(np.array([1.0])), 0.1, 0.25, NoiseIncrement(np.zeros(1), 0.2))


def test_tamed_step_divergence_error():
    @nb.njit
    def b(x, out):
        out[0] = math.exp(x[0])

    @nb.njit
    def db(x, out):
        out[0, 0] = 0.0

    @nb.njit
    def sig(x, out):
        out[0, 0] = 1.0

    p = make_problem("exp", 1, b, db, sig, K)
    with pytest.raises(DivergenceError) as err:
        tamed_step(p, PathState(np.array([800.0]), step_index=4), 0.1, 0.25, NoiseIncrement(np.zeros(1), 0.1))
    assert err.value.step_index == 5


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30), st.floats(1e-6, 0.5), st.floats(0.01, 0.49))
def test_taming_displacement_bounds(x, eta, alpha):
    # tamed_step asserts both bounds internally; check them here from outside too
    s = tamed_step(DW, PathState(np.array([x])), eta, alpha, NoiseIncrement(np.zeros(1), eta))
    disp = abs(s.position[0] - x)
    bx = abs(x - x**3)
    g = abs(1 - 3 * x**2)
    assert disp <= eta * bx * (1 + 1e-12) + 1e-300
    if g >= 1:
        assert disp <= eta ** (1 - alpha) * bx / g * (1 + 1e-12)


# ---------------------------------------------------------------- paths


def _numpy_tamed_path(problem, etas, alpha, x0, seed, tag, path):
    # oracle: straightforward numpy loop over the documented update
    z = path_normals(seed, tag, path, len(etas), problem.dim)
    x = np.array(x0, dtype=float)
    for k, e in enumerate(etas):
        g = np.linalg.svd(problem.drift_jacobian(x), compute_uv=False)[0]
        x = x + e * problem.drift(x) / (1 + e**alpha * g) + problem.diffusion(x) @ (math.sqrt(e) * z[k])
    return x


@pytest.mark.parametrize("problem", [DW, DW3], ids=["dw1", "dw3"])
def test_kernel_matches_numpy_oracle(problem):
    s = StepSchedule.polynomial(0.2, 0.6)
    x0 = np.full(problem.dim, 1.5)
    out = simulate_path(problem, s, 0.25, x0, 60, [60], 7, 99)
    ref = _numpy_tamed_path(problem, s.etas(60), 0.25, x0, 99, Stream.VARIABLE, 7)
    np.testing.assert_allclose(out[0][1], ref, rtol=1e-11, atol=1e-12)


def test_kernel_matches_repeated_tamed_step():
    s = StepSchedule.polynomial(0.2, 0.6)
    st_ = PathState(np.array([1.2]), rng_state=(5, int(Stream.VARIABLE), 3))
    for n in range(1, 31):
        st_ = tamed_step(DW, st_, s.etas(n)[-1], 0.25, NoiseIncrement.for_state(st_, s.etas(n)[-1]))
    out = simulate_path(DW, s, 0.25, [1.2], 30, [30], 3, 5)
    assert out[0][1][0] == st_.position[0]
    assert st_.time == pytest.approx(grid_time(s, 30), rel=1e-14)


def test_simulate_path_zero_steps():
    out = simulate_path(DW, StepSchedule.polynomial(0.1, 1), 0.25, [0.3], 0, [0], 0, 0)
    assert len(out) == 1 and out[0][0] == 0 and out[0][1][0] == 0.3


def test_simulate_path_checkpoints_and_determinism():
    s = StepSchedule.polynomial(0.1, 0.6)
    a = simulate_path(DW, s, 0.25, [0.5], 50, [0, 10, 50], 4, 123)
    b = simulate_path(DW, s, 0.25, [0.5], 50, [0, 10, 50], 4, 123)
    assert [c for c, _ in a] == [0, 10, 50]
    for (_, x), (_, y) in zip(a, b):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(ValueError):
        simulate_path(DW, s, 0.25, [0.5], 5, [10], 0, 0)


def test_ensemble_path_matches_single_path():
    s = StepSchedule.polynomial(0.1, 0.6)
    run = simulate_ensemble(DW, s, 0.25, [0.5], [20, 40], 10, 8)
    single = simulate_path(DW, s, 0.25, [0.5], 40, [20, 40], 6, 8)
    np.testing.assert_array_equal(run.positions[:, 6, :], np.array([x for _, x in single]))


def test_thread_count_does_not_change_results():
    s = StepSchedule.polynomial(0.2, 0.6)
    try:
        I.set_threads(1)
        a = simulate_ensemble(DW, s, 0.25, [1.0], [5, 30], 9000, 3)
        I.set_threads(4)
        b = simulate_ensemble(DW, s, 0.25, [1.0], [5, 30], 9000, 3)
    finally:
        I.set_threads(1)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_ou_mean_matches_tamed_product():
    # for b(x) = -x the tamed mean is x0 * prod(1 - eta_k / (1 + eta_k^alpha)) exactly
    s = StepSchedule.polynomial(0.1, 0.6)
    t = np.cumsum(s.etas(20000))
    n = int(np.argmin(abs(t - 3.0))) + 1
    x0 = 2.0
    run = simulate_ensemble(OU, s, 0.25, [x0], [n], 100_000, 17)
    y = run.positions[0, :, 0]
    e = s.etas(n)
    mean = x0 * np.prod(1 - e / (1 + e**0.25))
    se = y.std(ddof=1) / math.sqrt(len(y))
    assert abs(y.mean() - mean) < 3 * se
    # taming slows the contraction
    assert mean > x0 * math.exp(-grid_time(s, n))


# ---------------------------------------------------------------- reference


def test_reference_zero_time():
    assert simulate_reference(DW, 0.0, 1e-2, [0.7], 0, 0, 0.25)[0] == 0.7


def test_reference_brownian_law():
    run = reference_ensemble(BM, [1.0], 0.03, [0.5], 40_000, 1, 0.25)
    x = run.positions[0, :, 0]
    assert abs(x.mean() - 0.5) < 3 / math.sqrt(len(x))
    assert abs(x.var(ddof=1) - 1.0) < 3 * math.sqrt(2 / len(x))


def test_reference_last_step_is_shortened():
    # OU oracle: the deterministic part is x0 * prod(1 - h_k/(1 + h_k^alpha)) over the actual steps
    h, T, alpha = 0.3, 1.0, 0.25
    steps = [0.3, 0.3, 0.3, 0.1]
    run = reference_ensemble(OU, [T], h, [1.0], 20_000, 4, alpha)
    expected = np.prod([1 - s / (1 + s**alpha) for s in steps])
    y = run.positions[0, :, 0]
    assert abs(y.mean() - expected) < 3 * y.std() / math.sqrt(len(y))
    # a single path against a numpy loop with the same normals
    z = path_normals(4, Stream.REFERENCE, 0, 4, 1)[:, 0]
    x = 1.0
    for s, zk in zip(steps, z):
        x = x - s * x / (1 + s**alpha) + math.sqrt(s) * zk
    assert run.positions[0, 0, 0] == pytest.approx(x, rel=1e-14)


def test_reference_checkpoints_share_one_path():
    a = reference_ensemble(DW, [0.5, 1.0], 0.01, [0.2], 50, 9, 0.25)
    b = reference_ensemble(DW, [1.0], 0.01, [0.2], 50, 9, 0.25)
    np.testing.assert_allclose(a.positions[1], b.positions[0], rtol=1e-12)


def test_reference_stream_differs_from_variable_stream():
    s = StepSchedule.explicit([0.01] * 100)
    v = simulate_ensemble(DW, s, 0.25, [0.0], [100], 20, 3)
    r = reference_ensemble(DW, [grid_time(s, 100)], 0.01, [0.0], 20, 3, 0.25)
    assert not np.allclose(v.positions[0], r.positions[0])


# ---------------------------------------------------------------- coupled one step


def test_coupled_pure_diffusion_agree():
    for p in range(5):
        fine, one = coupled_one_step(BM, [0.4], 0.25, 0.25, 64, p, 2)
        assert fine[0] == pytest.approx(one[0], abs=1e-14)


def test_coupled_shares_noise_with_total_increment():
    fine, one = coupled_one_step_ensemble(OU, [1.0], 0.5, 0.25, 8, 3, 6)
    z = path_normals(6, Stream.COUPLED, 1, 8, 1)[:, 0]
    dB = math.sqrt(0.5 / 8) * z.sum()
    assert one[1, 0] == pytest.approx(1.0 - 0.5 / (1 + 0.5**0.25) + dB, rel=1e-13)


def test_coupled_requires_positive_substeps():
    with pytest.raises(ValueError):
        coupled_one_step(DW, [1.0], 0.1, 0.25, 0, 0, 0)


def test_one_step_error_order_multiplicative():
    etas = [2.0**-k for k in range(4, 10)]
    m = []
    for e in etas:
        f, o = coupled_one_step_ensemble(DW, [1.0], e, 0.25, 64, 4000, 1)
        m.append(np.mean((f - o)[:, 0] ** 4))
    slope = np.polyfit(np.log(etas), np.log(m), 1)[0]
    assert abs(slope - 4.0) <= 0.3


# ---------------------------------------------------------------- tangent and BEL


def test_tangent_constant_for_brownian_motion():
    st_ = simulate_tangent(BM, 1.0, 0.01, [0.3], [2.0], 5, 1)
    assert st_.tangent[0] == 2.0
    assert st_.base.time == 1.0


def test_tangent_ou_is_deterministic_decay():
    h = 1e-3
    X, R, W = tangent_ensemble(OU, 1.0, h, [0.0], [1.0], 10, 2)
    np.testing.assert_allclose(R[:, 0], (1 - h) ** 1000, rtol=1e-12)
    assert abs(R[0, 0] - math.exp(-1)) < h


def test_tangent_weight_is_noise_integral_for_unit_diffusion():
    # sigma = 1 and R = v constant: the weight is v * B_t
    X, R, W = tangent_ensemble(BM, 0.5, 0.1, [0.0], [3.0], 4, 8)
    np.testing.assert_allclose(W, 3.0 * (X[:, 0] - 0.0), rtol=1e-12)


def test_tangent_growth_constant_stable_under_refinement():
    vals = []
    for h in (2e-3, 1e-3):
        _, R, _ = tangent_ensemble(DW, 1.0, h, [1.5], [1.0], 20_000, 3)
        C = math.log(np.mean(R[:, 0] ** 2) / lyapunov_V([1.5], 1.0)) / 1.0
        vals.append(C)
    assert abs(vals[0] - vals[1]) <= 0.2 * abs(vals[1]) + 0.05


def test_bel_constant_function_is_zero():
    est, se = bel_gradient(OU, lambda X: np.ones(len(X)), 0.5, [0.7], [1.0], 20_000, 1e-2, 1)
    assert abs(est) < 3 * se


def test_bel_rejects_bad_arguments():
    with pytest.raises(ValueError):
        bel_gradient(OU, np.sin, 0.0, [0.7], [1.0], 100, 1e-2, 1)
    with pytest.raises(ValueError):
        bel_gradient(OU, lambda X: np.sin(X[:, 0]), 0.5, [0.7], [1.0], 1, 1e-2, 1)


def test_bel_against_closed_form_and_finite_difference():
    t, x0 = 0.5, 0.7
    exact = math.exp(-t) * math.cos(x0 * math.exp(-t)) * math.exp(-(1 - math.exp(-2 * t)) / 4)
    f = lambda X: np.sin(X[:, 0])  # noqa: E731
    est, se = bel_gradient(OU, f, t, [x0], [1.0], 40_000, 1e-2, 5)
    fd, fd_se = fd_gradient(OU, f, t, [x0], [1.0], 40_000, 1e-2, 5)
    assert abs(est - exact) < 3 * se
    assert abs(est - fd) < 3 * math.hypot(se, fd_se)


def test_singular_diffusion_is_reported():
    @nb.njit
    def sig(x, out):
        out[0, 0] = 0.0

    p = make_problem("degenerate", 1, OU.b, OU.db, sig, K)
    with pytest.raises(np.linalg.LinAlgError):
        tangent_ensemble(p, 0.1, 0.01, [0.0], [1.0], 3, 0)
