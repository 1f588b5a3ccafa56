import numpy as np
import pytest

from adaptive_tv import grid_ops, metrics
from adaptive_tv.denoise_tgv import TGVProblem, energy_tgv, project_dual_tgv, solve_tgv
from adaptive_tv.primal_dual import SolverConfig

TIGHT = SolverConfig(tol=1e-9, max_iter=200_000)


def affine_image(h, w, c, a, b):
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    return c + a * cols + b * rows


def test_project_dual_tgv():
    p = np.zeros((2, 2, 2))
    q = np.zeros((3, 2, 2))
    p[:, 0, 0] = (0.0, 2.0)
    q[:, 1, 0] = (3.0, 0.0, 4.0)
    pp, qq = project_dual_tgv(p, q, 1.0, 1.0)
    np.testing.assert_allclose(pp[:, 0, 0], (0.0, 1.0))
    np.testing.assert_allclose(qq[:, 1, 0], (0.6, 0.0, 0.8))
    small_p, small_q = 0.1 * p, 0.1 * q
    a, b = project_dual_tgv(small_p, small_q, 1.0, 1.0)
    np.testing.assert_array_equal(a, small_p)
    np.testing.assert_array_equal(b, small_q)
    # the off-diagonal entry counts twice
    q12 = np.zeros((3, 1, 1))
    q12[1] = 1.0
    _, out = project_dual_tgv(np.zeros((2, 1, 1)), q12, 1.0, 1.0)
    assert out[1, 0, 0] == pytest.approx(1 / np.sqrt(2))


@pytest.mark.parametrize("coef", [(0.2, 0.01, -0.02), (0.5, 0.0, 0.0), (0.0, 0.03, 0.03)])
@pytest.mark.parametrize("alphas", [(0.1, 0.2), (10.0, 10.0)])
def test_affine_fixed_point(coef, alphas):
    f = affine_image(10, 12, *coef)
    res = solve_tgv(TGVProblem(f, *alphas, lam=3.0), TIGHT)
    assert np.max(np.abs(res.u - f)) <= 1e-6


def test_affine_projection_preserved(rng):
    for _ in range(5):
        f = rng.random((10, 10))
        u = solve_tgv(TGVProblem(f, 0.3, 0.5), TIGHT).u
        np.testing.assert_allclose(metrics.affine_coefficients(u), metrics.affine_coefficients(f), atol=1e-6)


def test_large_weights_give_affine(rng):
    f = rng.random((8, 8))
    u = solve_tgv(TGVProblem(f, 50.0, 500.0), SolverConfig(tol=1e-11, max_iter=300_000)).u
    assert np.linalg.norm(u - metrics.affine_project(u)) <= 1e-4


def test_energy_examples(rng):
    f = affine_image(6, 6, 0.1, 0.02, 0.03)
    prob = TGVProblem(f, 1.0, 1.0)
    # v = grad u matches exactly only where the forward difference is defined
    assert energy_tgv(f, np.stack([np.full((6, 6), 0.02), np.full((6, 6), 0.03)]), prob) == pytest.approx(
        1.0 * np.sum(grid_ops.pointwise_norm(grid_ops.grad(f) - np.stack([np.full((6, 6), 0.02), np.full((6, 6), 0.03)])))
    )
    g = rng.random((6, 6))
    prob = TGVProblem(g, 0.7, 1.0, lam=2.0)
    zero_v = np.zeros((2, 6, 6))
    u = rng.random((6, 6))
    expected = 2.0 * np.sum((u - g) ** 2) + 0.7 * metrics.tv_value(u)
    assert energy_tgv(u, zero_v, prob) == pytest.approx(expected)
    res = solve_tgv(prob, TIGHT)
    assert res.energy <= energy_tgv(g, zero_v, prob)
    assert res.energy <= energy_tgv(res.u, zero_v, prob) + 1e-9


def test_tgv_below_tv(rng):
    for _ in range(3):
        f = rng.random((8, 8))
        prob = TGVProblem(f, 0.4, 0.4)
        res = solve_tgv(prob, TIGHT)
        assert res.energy <= energy_tgv(res.u, np.zeros_like(res.v), prob) + 1e-9


def test_scalar_equivalence(rng):
    f = rng.random((8, 8))
    lam, a0, a1 = 2.5, 0.5, 0.8
    a = solve_tgv(TGVProblem(f, a0, a1, lam=lam), TIGHT).u
    b = solve_tgv(TGVProblem(f, a0 / lam, a1 / lam, lam=1.0), TIGHT).u
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_rotation_absorbed_by_v():
    # u with gradient equal to a rigid-motion field: v takes it over, |grad u - v| ~ 0
    h, w = 10, 10
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    f = 0.5 + 0.02 * cols - 0.01 * rows
    res = solve_tgv(TGVProblem(f, 1.0, 1.0), TIGHT)
    p, _ = grid_ops.tgv_forward(res.u, res.v)
    assert np.max(grid_ops.pointwise_norm(p)) <= 1e-6


def test_spatial_fidelity(rng):
    f = rng.random((8, 8))
    lam = np.full((8, 8), 2.0)
    a = solve_tgv(TGVProblem(f, 0.3, 0.6, lam=lam), TIGHT).u
    b = solve_tgv(TGVProblem(f, 0.3, 0.6, lam=2.0), TIGHT).u
    np.testing.assert_allclose(a, b, atol=1e-8)
