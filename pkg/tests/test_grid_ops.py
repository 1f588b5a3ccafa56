import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_tv import grid_ops
from adaptive_tv.grid_ops import TGV_NORM_BOUND, TV_NORM_BOUND


def test_grad_examples():
    assert np.all(grid_ops.grad(np.full((4, 5), 3.2)) == 0)
    g = grid_ops.grad(np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(g[0], [[1.0, 0.0]])
    np.testing.assert_array_equal(g[1], [[0.0, 0.0]])
    g = grid_ops.grad(np.array([[0.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(g[0], np.zeros((2, 2)))
    np.testing.assert_array_equal(g[1], [[1.0, 1.0], [0.0, 0.0]])


def test_div_examples():
    assert np.all(grid_ops.div(np.zeros((2, 3, 4))) == 0)
    a = 0.7
    p = np.zeros((2, 1, 2))
    p[0, 0, 0] = a
    # div = -grad^T, so <grad u, p> = a (u2 - u1) = -<u, div p>
    np.testing.assert_allclose(grid_ops.div(p), [[a, -a]])


@pytest.mark.parametrize("dims", [(3, 3), (5, 7), (16, 16), (1, 6), (6, 1)])
def test_grad_div_adjoint(dims, rng):
    for _ in range(100):
        u = rng.standard_normal(dims)
        p = rng.standard_normal((2,) + dims)
        lhs = np.sum(grid_ops.grad(u) * p)
        rhs = np.sum(u * grid_ops.div(p))
        assert abs(lhs + rhs) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(p)


@pytest.mark.parametrize("dims", [(3, 3), (5, 7), (16, 16), (6, 6)])
def test_sym_grad_div2_adjoint(dims, rng):
    for _ in range(100):
        v = rng.standard_normal((2,) + dims)
        q = rng.standard_normal((3,) + dims)
        lhs = grid_ops.tensor_inner(grid_ops.sym_grad(v), q)
        rhs = np.sum(v * grid_ops.div2(q))
        assert abs(lhs + rhs) <= 1e-12 * np.linalg.norm(v) * np.linalg.norm(q) * 2


@pytest.mark.parametrize("dims", [(3, 3), (5, 7), (16, 16)])
def test_tgv_forward_adjoint(dims, rng):
    for _ in range(100):
        u = rng.standard_normal(dims)
        v = rng.standard_normal((2,) + dims)
        p = rng.standard_normal((2,) + dims)
        q = rng.standard_normal((3,) + dims)
        kp, kq = grid_ops.tgv_forward(u, v)
        a, b = grid_ops.tgv_adjoint(p, q)
        lhs = np.sum(kp * p) + grid_ops.tensor_inner(kq, q)
        rhs = np.sum(u * a) + np.sum(v * b)
        scale = math.sqrt(np.sum(u**2) + np.sum(v**2)) * math.sqrt(np.sum(p**2) + np.sum(q**2))
        assert abs(lhs - rhs) <= 1e-12 * scale


def test_sym_grad_examples():
    assert np.all(grid_ops.sym_grad(np.full((2, 5, 5), 1.5)) == 0)
    h, w = 6, 7
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    ramp = np.stack([cols, np.zeros((h, w))])
    q = grid_ops.sym_grad(ramp)
    # c11 is a backward difference, zero in the first and last column
    np.testing.assert_allclose(q[0][:, 1:-1], 1.0)
    np.testing.assert_allclose(q[0][:, [0, -1]], 0.0)
    np.testing.assert_allclose(q[1][:-1, :-1], 0.0)
    np.testing.assert_allclose(q[2], 0.0)
    # rotation field (y, -x): symmetrization removes it in the interior
    skew = np.stack([rows, -cols])
    q = grid_ops.sym_grad(skew)
    np.testing.assert_allclose(q[1][:-1, :-1], 0.0, atol=1e-15)


def test_rigid_motion_annihilated(rng):
    h, w = 8, 9
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    for _ in range(10):
        m = rng.standard_normal(2)
        s = rng.standard_normal()
        v = np.stack([m[0] + s * rows, m[1] - s * cols])
        q = grid_ops.sym_grad(v)
        np.testing.assert_allclose(q[:, :-1, :-1], 0.0, atol=1e-12)


def test_div2_single_pixel_dipole():
    q = np.zeros((3, 4, 4))
    q[0, 1, 1] = 1.0
    out = grid_ops.div2(q)
    nz = np.argwhere(np.abs(out) > 0)
    assert {tuple(i) for i in nz} == {(0, 1, 1), (0, 1, 0)}
    assert out[0, 1, 1] == -out[0, 1, 0]
    assert np.all(grid_ops.div2(np.zeros((3, 3, 3))) == 0)


def test_norm_estimates_within_bounds():
    tv = grid_ops.op_norm_estimate("tv", (64, 64))
    assert 2.7 < tv <= TV_NORM_BOUND + 1e-9
    tgv = grid_ops.op_norm_estimate("tgv", (64, 64))
    assert tgv <= TGV_NORM_BOUND + 1e-9
    assert TGV_NORM_BOUND == pytest.approx(3.37228, abs=1e-5)
    assert grid_ops.op_norm_estimate("tv", (1, 2)) == pytest.approx(math.sqrt(2), abs=1e-9)


@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 2**32 - 1))
def test_norm_estimate_never_exceeds_bound(h, w, seed):
    assert grid_ops.op_norm_estimate("tv", (h, w), n_iter=100, seed=seed) <= TV_NORM_BOUND + 1e-9
    if min(h, w) >= 2:
        assert grid_ops.op_norm_estimate("tgv", (h, w), n_iter=100, seed=seed) <= TGV_NORM_BOUND + 1e-9


def test_unknown_operator():
    with pytest.raises(ValueError):
        grid_ops.op_norm_estimate("tv3", (4, 4))
