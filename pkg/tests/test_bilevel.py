import io
import json

import numpy as np
import pytest

from adaptive_tv.bilevel import (
    BilevelConfig,
    Regularizer,
    TrainingPair,
    optimize_lambda,
    optimize_lambda_batch,
    piggyback_solve,
    training_loss,
)
from adaptive_tv.partition import BoxConstraint
from adaptive_tv.primal_dual import ADJOINT_LIMIT, SolverConfig
from adaptive_tv.validation import fd_hypergradient, lambda_grid_search, log_grid

CFG = SolverConfig(tol=1e-9, max_iter=100_000)


def noisy_pair(rng, n=12, sigma=0.1):
    clean = np.zeros((n, n))
    clean[:, n // 2 :] = 0.8
    clean[n // 3 : 2 * n // 3, 2:5] = 0.4
    return TrainingPair(clean, clean + sigma * rng.standard_normal(clean.shape))


def test_training_pair_validation():
    with pytest.raises(ValueError):
        TrainingPair(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        Regularizer("tv3")
    with pytest.raises(ValueError):
        Regularizer("tv", alpha0=0.0)


def test_loss_definition(rng):
    a, b = rng.random((4, 4)), rng.random((4, 4))
    assert training_loss(a, b) == pytest.approx(0.5 * np.sum((a - b) ** 2))


def test_grad_sign_cases(rng):
    f = rng.random((8, 8))
    for lam in (0.1, 1.0, 10.0):
        # exactly zero in the constant-solution regime, up to solver accuracy
        assert piggyback_solve(TrainingPair(f, f), lam, cfg=CFG).grad <= 1e-5
    flat = TrainingPair(np.full_like(f, f.mean()), f)
    assert piggyback_solve(flat, 20.0, cfg=CFG).grad >= 0.0


@pytest.mark.parametrize("kind", ["tv", "tgv"])
@pytest.mark.parametrize("placement", ["dual", "primal"])
def test_piggyback_matches_fd(kind, placement, rng):
    pair = noisy_pair(rng)
    reg = Regularizer(kind, 0.1, 0.2)
    pig = piggyback_solve(pair, 1.3, reg, CFG, placement=placement)
    fd = fd_hypergradient(pair, 1.3, regularizer=reg, x0=pig.x, y0=pig.y)
    assert pig.converged
    assert abs(pig.grad - fd) <= 5e-2 * abs(fd)


def test_batched_piggyback_matches_single(rng):
    pairs = [noisy_pair(rng) for _ in range(3)]
    batch = TrainingPair(np.stack([p.clean for p in pairs]), np.stack([p.noisy for p in pairs]))
    lam = np.array([0.5, 1.0, 4.0])
    res = piggyback_solve(batch, lam, cfg=CFG)
    for b, p in enumerate(pairs):
        single = piggyback_solve(p, lam[b], cfg=CFG)
        assert res.grad[b] == pytest.approx(single.grad, rel=1e-5, abs=1e-9)
        assert res.loss[b] == pytest.approx(single.loss, rel=1e-8)


def test_adjoint_divergence_is_reported(rng, monkeypatch):
    import adaptive_tv.primal_dual as pd

    monkeypatch.setattr(pd, "ADJOINT_LIMIT", 1e-30)
    pair = noisy_pair(rng)
    with pytest.raises(pd.AdjointDivergenceError):
        piggyback_solve(pair, 1.0, cfg=SolverConfig(max_iter=50, warn=False))
    assert ADJOINT_LIMIT == 1e8


def test_bilevel_config_validation():
    with pytest.raises(ValueError):
        BilevelConfig(nu=1.5)
    with pytest.raises(ValueError):
        BilevelConfig(tol=0)
    with pytest.raises(ValueError):
        BilevelConfig(max_outer=0)
    with pytest.raises(ValueError):
        BilevelConfig(step_rule="newton")
    with pytest.raises(ValueError):
        BilevelConfig(rel_tol=-1)


def test_boundary_cases_hit_box_exactly(rng):
    f = noisy_pair(rng).noisy
    box = BoxConstraint(0.01)
    res = optimize_lambda(TrainingPair(f, f), bcfg=BilevelConfig(box=box), cfg=SolverConfig(tol=1e-7, max_iter=50_000))
    assert res.lambda_star == 1.0 / box.c0
    flat = TrainingPair(np.full_like(f, f.mean()), f)
    res = optimize_lambda(flat, bcfg=BilevelConfig(box=box), cfg=SolverConfig(tol=1e-7, max_iter=50_000))
    assert res.lambda_star == box.c0


def test_lambda_stays_in_box_and_loss_descends(rng):
    pair = noisy_pair(rng)
    box = BoxConstraint(0.2)
    for rule in ("adaptive", "damped"):
        res = optimize_lambda(pair, Regularizer("tv", 1.0), BilevelConfig(box=box, step_rule=rule, zeta=2.0),
                              SolverConfig(tol=1e-8, max_iter=50_000))
        lams = [r["lambda"] for r in res.trace]
        assert all(box.lower <= v <= box.upper for v in lams)
        accepted = [r["loss"] for r in res.trace if r["accepted"]]
        if rule == "adaptive":
            assert all(b <= a + 1e-12 for a, b in zip(accepted, accepted[1:]))
        assert res.cost == pytest.approx(2 * accepted[-1])


def test_damped_rule_follows_update_formula(rng):
    pair = noisy_pair(rng)
    bcfg = BilevelConfig(step_rule="damped", zeta=0.5, nu=0.5, max_outer=4, tol=1e-12)
    res = optimize_lambda(pair, Regularizer("tv", 1.0), bcfg, SolverConfig(tol=1e-9, max_iter=50_000))
    zeta = 0.5
    for prev, cur in zip(res.trace, res.trace[1:]):
        expected = bcfg.box.clamp(prev["lambda"] - zeta * prev["grad"])
        assert cur["lambda"] == pytest.approx(expected)
        zeta *= 0.5


def test_optimizer_agrees_with_grid(rng):
    grid = log_grid(0.01, 64)
    cell = grid[1] / grid[0]
    for _ in range(3):
        pair = noisy_pair(rng, n=16, sigma=0.15)
        best, _ = lambda_grid_search(pair, Regularizer("tv", 1.0), grid)
        res = optimize_lambda(pair, Regularizer("tv", 1.0), cfg=SolverConfig(tol=1e-8, max_iter=50_000))
        assert 1 / cell <= res.lambda_star / best <= cell


def test_verbose_trace_is_json_lines(rng):
    pair = noisy_pair(rng)
    buf = io.StringIO()
    res = optimize_lambda(pair, verbose=True, stream=buf, bcfg=BilevelConfig(max_outer=3))
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(lines) == len(res.trace)
    assert {"k", "lambda", "loss", "grad"} <= set(lines[0])


def test_batch_optimizer_independent_cells(rng):
    pairs = [noisy_pair(rng, sigma=s) for s in (0.02, 0.3)]
    batch = TrainingPair(np.stack([p.clean for p in pairs]), np.stack([p.noisy for p in pairs]))
    cfg = SolverConfig(tol=1e-8, max_iter=50_000)
    res = optimize_lambda_batch(batch, Regularizer("tv", 1.0), cfg=cfg)
    assert res.lambda_star.shape == (2,)
    # less noise -> trust the data more
    assert res.lambda_star[0] > res.lambda_star[1]
    for b, p in enumerate(pairs):
        single = optimize_lambda(p, Regularizer("tv", 1.0), cfg=cfg)
        assert res.lambda_star[b] == pytest.approx(single.lambda_star, rel=1e-6)


def test_optimize_lambda_rejects_batches(rng):
    with pytest.raises(ValueError):
        optimize_lambda(TrainingPair(rng.random((2, 4, 4)), rng.random((2, 4, 4))))


def test_kernel_projection(rng):
    from adaptive_tv.bilevel import kernel_projection

    f = rng.random((2, 5, 6))
    np.testing.assert_allclose(kernel_projection(f, "tv"), f.mean(axis=(1, 2), keepdims=True) + 0 * f)
    rows, cols = np.mgrid[0:5, 0:6]
    affine = 0.1 + 0.02 * rows - 0.03 * cols
    np.testing.assert_allclose(kernel_projection(affine[None], "tgv")[0], affine, atol=1e-12)


def test_plateau_resolves_to_lower_bound(rng):
    f = rng.random((10, 10))
    flat = TrainingPair(np.full_like(f, f.mean()), f)
    cfg = SolverConfig(tol=1e-8, max_iter=50_000)
    res = optimize_lambda(flat, bcfg=BilevelConfig(), cfg=cfg)
    assert res.lambda_star == BoxConstraint().c0 and res.trace[-1].get("plateau")
    # without the tie-break the loop stops somewhere on the plateau, with the same loss
    raw = optimize_lambda(flat, bcfg=BilevelConfig(plateau_tol=None), cfg=cfg)
    assert raw.lambda_star > 0.1
    assert raw.cost == pytest.approx(res.cost, abs=1e-8)


def test_init_step_scales_first_move(rng):
    pair = noisy_pair(rng)
    res = optimize_lambda(pair, bcfg=BilevelConfig(init_step=0.25, max_outer=1))
    assert abs(res.trace[1]["lambda"] - 1.0) == pytest.approx(0.25)
