import itertools
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from tamed_em.distances import (
    EnsembleError,
    PathEnsemble,
    default_bins,
    lyapunov_moment,
    read_binary,
    read_csv,
    sliced_wasserstein1,
    tv_histogram,
    wasserstein1_1d,
    write_binary,
    write_csv,
)

# ---------------------------------------------------------------- W1


def test_w1_examples():
    assert wasserstein1_1d([0.0, 1.0], [0.0, 1.0]) == 0.0
    assert wasserstein1_1d([0.0], [1.0]) == 1.0
    assert wasserstein1_1d([0.0, 2.0], [1.0, 3.0]) == 1.0
    assert wasserstein1_1d([0.0, 1.0], [2.0, 3.0]) == 2.0
    assert wasserstein1_1d([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]) == 1.0


def test_w1_is_order_free():
    assert wasserstein1_1d([3.0, 0.0, 1.0], [1.0, 2.0, 0.0]) == pytest.approx(1 / 3, rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 7).flatmap(lambda m: st.tuples(
    arrays(np.float64, m, elements=st.floats(-100, 100)),
    arrays(np.float64, m, elements=st.floats(-100, 100)))))
def test_w1_matches_brute_force_assignment(pair):
    # oracle: the optimal matching over every permutation
    a, b = pair
    best = min(np.mean(np.abs(a - b[list(p)])) for p in itertools.permutations(range(len(a))))
    assert wasserstein1_1d(a, b) == pytest.approx(best, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 50, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 50, elements=st.floats(-1e3, 1e3)))
def test_w1_matches_scipy(a, b):
    assert wasserstein1_1d(a, b) == pytest.approx(stats.wasserstein_distance(a, b), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30).flatmap(lambda m: st.tuples(*[
    arrays(np.float64, m, elements=st.floats(-1e3, 1e3)) for _ in range(3)])))
def test_w1_metric_properties(triple):
    a, b, c = triple
    ab, ba = wasserstein1_1d(a, b), wasserstein1_1d(b, a)
    assert ab >= 0 and wasserstein1_1d(a, a) == 0.0
    assert ab == ba
    assert ab <= wasserstein1_1d(a, c) + wasserstein1_1d(c, b) + 1e-12 * (1 + ab)


def test_w1_rejects_mismatched_inputs():
    with pytest.raises(EnsembleError):
        wasserstein1_1d([0.0, 1.0], [0.0, 1.0, 2.0])
    with pytest.raises(EnsembleError):
        wasserstein1_1d(np.zeros((3, 2)), np.zeros((3, 2)))


def test_sliced_reduces_to_w1_in_one_dimension():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=300), rng.normal(1.0, 2.0, size=300)
    assert sliced_wasserstein1(a, b, n_projections=7, seed=3) == wasserstein1_1d(a, b)


def test_sliced_two_point_masses():
    # mean |cos theta| over the circle is 2/pi
    a = np.zeros((2, 2))
    b = np.tile([1.0, 0.0], (2, 1))
    assert sliced_wasserstein1(a, b, n_projections=4096, seed=0) == pytest.approx(2 / math.pi, rel=0.02)


def test_sliced_translation_consistent():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(300, 3)) * 1.5
    shift = np.array([3.0, -1.0, 0.5])
    v = sliced_wasserstein1(a, b, 32, 1)
    assert abs(sliced_wasserstein1(a + shift, b + shift, 32, 1) - v) < 1e-10


def test_sliced_below_w1_on_embedded_line():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=400), rng.normal(1.0, 0.5, size=400)
    emb = lambda v: np.column_stack([v, np.zeros_like(v)])  # noqa: E731
    assert sliced_wasserstein1(emb(x), emb(y), 64, 2) <= wasserstein1_1d(x, y)


def test_sliced_translation_oracle():
    # every projection of a pure shift u costs |<u, theta>|; the mean over the circle is 2|u|/pi
    rng = np.random.default_rng(1)
    a = rng.normal(size=(500, 2))
    u = np.array([0.6, -0.8])
    val = sliced_wasserstein1(a, a + u, n_projections=4096, seed=0)
    assert val == pytest.approx(2 / math.pi, rel=0.02)


def test_sliced_is_reproducible_and_seeded():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3)) + 0.3
    assert sliced_wasserstein1(a, b, 16, 5) == sliced_wasserstein1(a, b, 16, 5)
    assert sliced_wasserstein1(a, b, 16, 5) != sliced_wasserstein1(a, b, 16, 6)
    assert sliced_wasserstein1(a, a, 16, 5) == 0.0


def test_sliced_dimension_mismatch():
    with pytest.raises(EnsembleError):
        sliced_wasserstein1(np.zeros((4, 2)), np.zeros((4, 3)))


# ---------------------------------------------------------------- TV


def test_tv_identical_is_zero():
    a = np.random.default_rng(3).normal(size=1000)
    assert tv_histogram(a, a.copy()) == 0.0


def test_tv_disjoint_is_one():
    assert tv_histogram([0.0, 0.1, 0.2], [5.0, 5.1, 5.2], 10) == 1.0


def test_tv_two_cell_example():
    # pooled range [0, 1] widened by 5% per side puts the 2-bin edge at 0.5
    assert tv_histogram([0.0, 0.0, 1.0, 1.0], [0.0, 1.0, 1.0, 1.0], 2) == 0.25
    assert tv_histogram([0.1, 0.1, 0.1, 0.9], [0.1, 0.1, 0.9, 0.9], 2) == 0.25


@pytest.mark.parametrize("d", [1, 2])
def test_tv_refinement_never_decreases(d):
    rng = np.random.default_rng(8 + d)
    a, b = rng.normal(size=(500, d)), rng.normal(0.2, 1.0, size=(500, d))
    vals = [tv_histogram(a, b, k) for k in (2, 4, 8, 16, 32)]
    assert all(y >= x - 1e-15 for x, y in zip(vals, vals[1:]))


def test_tv_bounded_and_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(400, 2)), rng.normal(0.5, 1, size=(400, 2))
    v = tv_histogram(a, b)
    assert 0 <= v <= 1 and v == tv_histogram(b, a)


def test_tv_dimension_limit():
    with pytest.raises(EnsembleError, match="d <= 3"):
        tv_histogram(np.zeros((5, 4)), np.zeros((5, 4)))


def test_default_bins():
    assert default_bins(10) == 8
    assert default_bins(20000) == 28
    assert default_bins(10**9) == 256


# ---------------------------------------------------------------- moments


def test_lyapunov_moment_examples():
    m, se, sat = lyapunov_moment([0.0, 0.0], 3.0)
    assert m == pytest.approx(math.exp(9 / 8), rel=1e-15) and se == 0.0 and not sat
    m, _, _ = lyapunov_moment([2.0, -2.0], 1.0)
    assert m == pytest.approx(math.exp(2), rel=1e-15)


def test_lyapunov_moment_lower_bound_and_validation():
    rng = np.random.default_rng(5)
    m, _, _ = lyapunov_moment(rng.normal(size=(100, 2)), 2.0)
    assert m >= math.exp(3 * 2 / 8)
    with pytest.raises(ValueError):
        lyapunov_moment([0.0, 1.0], 0.5)


# ---------------------------------------------------------------- ensembles and I/O


def test_path_ensemble_validation():
    assert PathEnsemble(np.arange(3.0)).dim == 1
    with pytest.raises(EnsembleError):
        PathEnsemble(np.zeros((1, 2)))
    with pytest.raises(EnsembleError):
        PathEnsemble(np.array([0.0, np.nan]))
    with pytest.raises(EnsembleError):
        PathEnsemble(np.zeros((2, 2, 2)))


@pytest.mark.parametrize("d", [1, 3])
def test_binary_round_trip(tmp_path, d):
    x = np.random.default_rng(d).normal(size=(17, d))
    write_binary(tmp_path / "e.bin", PathEnsemble(x))
    np.testing.assert_array_equal(read_binary(tmp_path / "e.bin"), x)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"TSDE"
    assert struct.unpack_from("<IIQ", raw, 4) == (1, d, 17)
    assert len(raw) == 20 + 8 * 17 * d


def test_binary_errors(tmp_path):
    x = np.ones((4, 2))
    p = tmp_path / "e.bin"
    write_binary(p, x)
    raw = p.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "ver.bin").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    (tmp_path / "hdr.bin").write_bytes(raw[:10])
    with pytest.raises(EnsembleError, match="magic"):
        read_binary(tmp_path / "magic.bin")
    with pytest.raises(EnsembleError, match="version"):
        read_binary(tmp_path / "ver.bin")
    with pytest.raises(EnsembleError, match="expected 8"):
        read_binary(tmp_path / "short.bin")
    with pytest.raises(EnsembleError, match="header"):
        read_binary(tmp_path / "hdr.bin")
    with pytest.raises(OSError):
        write_binary(tmp_path / "missing" / "e.bin", x)


def test_csv_round_trip_is_exact(tmp_path):
    x = np.array([[0.1, -1e-300], [1 / 3, 2.0**60]])
    write_csv(tmp_path / "e.csv", x)
    np.testing.assert_array_equal(read_csv(tmp_path / "e.csv"), x)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "x0,x1"
