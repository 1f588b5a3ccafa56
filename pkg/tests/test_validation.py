import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_tv.bilevel import Regularizer, TrainingPair, piggyback_solve
from adaptive_tv.primal_dual import SolverConfig
from adaptive_tv.validation import (
    constancy_threshold,
    fd_hypergradient,
    lambda_grid_search,
    log_grid,
    synthetic_pair,
    taut_string_1d,
    two_pixel_rof,
)


def brute_rof_1d(f, alpha):
    import cvxpy as cp

    u = cp.Variable(f.size)
    cp.Problem(cp.Minimize(cp.sum_squares(u - f) + alpha * cp.norm1(cp.diff(u)))).solve()
    return u.value


def test_two_pixel_examples():
    assert two_pixel_rof(0.4, 0.4, 1.0) == (0.4, 0.4)
    assert two_pixel_rof(0.0, 1.0, 2.0) == (0.5, 0.5)
    assert two_pixel_rof(0.0, 1.0, 0.5) == pytest.approx((0.25, 0.75))
    with pytest.raises(ValueError):
        two_pixel_rof(0, 1, -1)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 5))
def test_two_pixel_is_minimizer(a, b, alpha):
    u1, u2 = two_pixel_rof(a, b, alpha)
    e = lambda x, y: (x - a) ** 2 + (y - b) ** 2 + alpha * abs(y - x)
    best = e(u1, u2)
    for dx, dy in [(1e-4, 0), (0, 1e-4), (-1e-4, 0), (0, -1e-4), (1e-4, 1e-4)]:
        assert best <= e(u1 + dx, u2 + dy) + 1e-12
    assert u1 + u2 == pytest.approx(a + b)


def test_taut_string_examples():
    np.testing.assert_array_equal(taut_string_1d(np.full(7, 0.3), 1.0), 0.3)
    np.testing.assert_allclose(taut_string_1d([0.0, 1.0], 0.5), two_pixel_rof(0.0, 1.0, 0.5))
    step = np.r_[np.zeros(10), np.ones(10)]
    np.testing.assert_allclose(taut_string_1d(step, 100.0), 0.5)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.floats(0, 3))
def test_taut_string_mean_preserved(f, alpha):
    out = taut_string_1d(f, alpha)
    assert np.mean(out) == pytest.approx(np.mean(f), abs=1e-12)


def test_taut_string_matches_convex_solver(rng):
    pytest.importorskip("cvxpy")
    for n, alpha in [(5, 0.3), (30, 0.1), (60, 1.0)]:
        f = rng.standard_normal(n)
        np.testing.assert_allclose(taut_string_1d(f, alpha), brute_rof_1d(f, alpha), atol=1e-5)


def test_constancy_threshold_against_dual_certificate(rng):
    cp = pytest.importorskip("cvxpy")
    f = rng.random((6, 6))
    thr = constancy_threshold(f)
    # exact threshold: smallest max |p| with div p = 2 (mean - f)
    h, w = f.shape
    p1, p2, t = cp.Variable((h, w - 1)), cp.Variable((h - 1, w)), cp.Variable()
    P1 = cp.hstack([p1, np.zeros((h, 1))])
    P2 = cp.vstack([p2, np.zeros((1, w))])
    div = P1 - cp.hstack([np.zeros((h, 1)), p1]) + P2 - cp.vstack([np.zeros((1, w)), p2])
    cons = [div == 2 * (f.mean() - f)]
    cons += [cp.norm(cp.hstack([P1[i, j], P2[i, j]])) <= t for i in range(h) for j in range(w)]
    cp.Problem(cp.Minimize(t), cons).solve()
    assert thr == pytest.approx(float(t.value), rel=1e-2)
    assert thr >= float(t.value) * (1 - 1e-6)


def test_fd_hypergradient_signs(rng):
    f = rng.random((8, 8))
    same = TrainingPair(f, f)
    assert fd_hypergradient(same, 1.0) <= 0.0
    flat = TrainingPair(np.full_like(f, f.mean()), f)
    assert fd_hypergradient(flat, 20.0) >= 0.0
    with pytest.raises(ValueError):
        fd_hypergradient(same, 1e-4, h=1e-3)


def test_fd_matches_piggyback(rng):
    clean = rng.random((10, 10))
    pair = TrainingPair(clean, clean + 0.1 * rng.standard_normal(clean.shape))
    reg = Regularizer("tv", 0.1)
    pig = piggyback_solve(pair, 1.0, reg, SolverConfig(tol=1e-9, max_iter=100_000))
    fd = fd_hypergradient(pair, 1.0, regularizer=reg, x0=pig.x, y0=pig.y)
    assert abs(pig.grad - fd) <= 5e-2 * abs(fd)


def test_grid_search(rng):
    f = rng.random((8, 8))
    best, costs = lambda_grid_search(TrainingPair(f, f), grid=log_grid(0.01, 16))
    assert best == pytest.approx(100.0)
    assert costs.shape == (16,)
    best, _ = lambda_grid_search(TrainingPair(np.full_like(f, f.mean()), f), grid=log_grid(0.01, 16))
    assert best == pytest.approx(0.01)
    # interior minimum on a noisy piecewise-constant image
    clean = np.zeros((12, 12))
    clean[:, 6:] = 1.0
    noisy = clean + 0.2 * rng.standard_normal(clean.shape)
    best, costs = lambda_grid_search(TrainingPair(clean, noisy), Regularizer("tv", 1.0))
    assert 0.01 < best < 100.0


def test_grid_ties_pick_smaller_lambda():
    f = np.full((4, 4), 0.5)  # constant data: every lambda gives the same cost
    best, costs = lambda_grid_search(TrainingPair(f, f), grid=[3.0, 1.0, 2.0])
    assert best == 1.0
    assert np.ptp(costs) == 0.0


def test_log_grid():
    g = log_grid(0.01)
    assert g.size == 64 and g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(100.0)


def test_synthetic_pair_reproducible():
    a, b = synthetic_pair(32, seed=4), synthetic_pair(32, seed=4)
    np.testing.assert_array_equal(a.noisy, b.noisy)
    resid = a.noisy - a.clean
    assert resid[:, :16].std() > 3 * resid[:, 16:].std()
