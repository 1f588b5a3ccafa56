"""Independent reference solutions used to check the solvers."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .bilevel import Regularizer, TrainingPair, lower_level_solve, training_loss
from .primal_dual import SolverConfig, iterate

ORACLE_TOL = 1e-9
# the grid oracle only has to rank costs, far-off points need not be tight
GRID_TOL = 1e-7


def two_pixel_rof(a: float, b: float, alpha: float) -> tuple[float, float]:
    """Exact minimizer of ``(u1 - a)^2 + (u2 - b)^2 + alpha |u2 - u1|``."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    m = 0.5 * (a + b)
    d = b - a
    if abs(d) <= alpha:
        return m, m
    shrink = 0.5 * alpha * np.sign(d)
    return a + shrink, b - shrink


def taut_string_1d(signal: Sequence[float], alpha: float) -> np.ndarray:
    """Exact minimizer of ``sum (u - f)^2 + alpha sum |u[k+1] - u[k]|``.

    Direct O(N) scan that tracks the taut string inside the
    tube of half-width ``alpha / 2`` around the cumulative sum of ``f``;
    each segment's value is the slope of the string.
    """
    f = np.asarray(signal, dtype=float).ravel()
    n = f.size
    if n == 0:
        raise ValueError("signal must be nonempty")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    lam = 0.5 * alpha
    out = np.empty(n)
    if lam == 0.0 or n == 1:
        out[:] = f
        return out

    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = f[0] - lam, f[0] + lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                while True:
                    out[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = kminus = k0
                vmin = f[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                while True:
                    out[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = kplus = k0
                vmax = f[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                out[k0 : k + 1] = vmin
                return out
        umin += f[k + 1] - vmin
        if umin < -lam:
            while True:
                out[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = kplus = kminus = k0
            vmin = f[k]
            vmax = vmin + 2 * lam
            umin, umax = lam, -lam
            continue
        umax += f[k + 1] - vmax
        if umax > lam:
            while True:
                out[k0] = vmax
                k0 += 1
                if k0 > kplus:
                    break
            k = kplus = kminus = k0
            vmax = f[k]
            vmin = vmax - 2 * lam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def _oracle_cfg(cfg: SolverConfig | None) -> SolverConfig:
    cfg = cfg or SolverConfig(tol=ORACLE_TOL, max_iter=500_000)
    if cfg.tol > ORACLE_TOL:
        cfg = replace(cfg, tol=ORACLE_TOL)
    return cfg


def fd_hypergradient(
    pair: TrainingPair,
    lam,
    h: float = 1e-3,
    regularizer: Regularizer = Regularizer(),
    cfg: SolverConfig | None = None,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
):
    """Central difference ``(L(lam + h) - L(lam - h)) / 2h`` of the training loss.

    Uses forward solves only, with the tolerance tightened to at most 1e-9.
    ``x0``/``y0`` may warm-start both solves (e.g. from the solution at
    ``lam``); batched pairs with ``lam`` of shape ``(B,)`` give one value each.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam - h <= 0):
        raise ValueError("lam - h must stay positive")
    cfg = _oracle_cfg(cfg)
    plus = lower_level_solve_warm(pair, lam + h, regularizer, cfg, x0, y0)
    minus = lower_level_solve_warm(pair, lam - h, regularizer, cfg, x0, y0)
    diff = (np.asarray(training_loss(plus, pair.clean)) - np.asarray(training_loss(minus, pair.clean))) / (2.0 * h)
    return float(diff) if diff.ndim == 0 else diff


def lower_level_solve_warm(pair, lam, regularizer, cfg, x0=None, y0=None) -> np.ndarray:
    if x0 is None and y0 is None:
        return lower_level_solve(pair, lam, regularizer, cfg).x[0]
    lam = np.asarray(lam, dtype=float)
    field = lam if lam.ndim == 0 else lam.reshape(lam.shape + (1, 1))
    return iterate(regularizer.operator(), pair.noisy, field, cfg, x0=x0, y0=y0).x[0]


def log_grid(c0: float, n: int = 64) -> np.ndarray:
    """``n`` log-spaced points spanning the box ``[c0, 1/c0]``."""
    return np.geomspace(c0, 1.0 / c0, n)


def lambda_grid_search(
    pair: TrainingPair,
    regularizer: Regularizer = Regularizer(),
    grid: Sequence[float] | None = None,
    cfg: SolverConfig | None = None,
    tie_tol: float = 1e-9,
) -> tuple[float, np.ndarray]:
    """Brute-force minimizer of the cost ``|u(lam) - clean|^2`` over ``grid``.

    All grid points are solved as one batch.  Returns the best grid value
    and the costs in ascending-``lam`` order.  Costs within
    ``tie_tol * max(1, min cost)`` of the minimum count as ties (solver
    noise on flat stretches of the curve) and go to the smaller ``lam``.
    """
    grid = np.sort(np.asarray(log_grid(0.01) if grid is None else grid, dtype=float))
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    if np.any(grid <= 0):
        raise ValueError("grid values must be positive")
    clean = np.asarray(pair.clean, dtype=float)
    if clean.ndim != 2:
        raise ValueError("grid search expects a single (h, w) pair")
    n = grid.size
    stacked = TrainingPair(np.broadcast_to(clean, (n,) + clean.shape), np.broadcast_to(pair.noisy, (n,) + clean.shape))
    cfg = cfg or SolverConfig(tol=GRID_TOL, max_iter=50_000, warn=False)
    u = lower_level_solve(stacked, grid, regularizer, cfg).x[0]
    costs = 2.0 * np.asarray(training_loss(u, clean))
    floor = costs.min()
    best = int(np.argmax(costs <= floor + tie_tol * max(1.0, abs(floor))))
    return float(grid[best]), costs


def constancy_threshold(
    noisy: np.ndarray,
    n_bisect: int = 24,
    flat_tol: float = 1e-6,
    cfg: SolverConfig | None = None,
):
    """Smallest TV weight ``alpha`` (unit fidelity) whose minimizer is constant, by bisection.

    The predicate is ``std(u_alpha) <= flat_tol``, monotone in ``alpha``
    because the minimizer stays constant above the threshold.  The bracket
    starts at ``[0, 4 |noisy - mean|_2 + 1]``; ``noisy`` may be a ``(B, h, w)``
    stack, bisected jointly (one value each).  Returns the upper end of the
    final bracket.
    """
    from .denoise_tv import TVProblem, solve_tv

    noisy = np.asarray(noisy, dtype=float)
    single = noisy.ndim == 2
    stack = noisy[None] if single else noisy
    cfg = cfg or SolverConfig(tol=1e-10, max_iter=100_000, warn=False)
    centered = stack - stack.mean(axis=(-2, -1), keepdims=True)
    lo = np.zeros(stack.shape[0])
    hi = 4.0 * np.sqrt(np.sum(centered**2, axis=(-2, -1))) + 1.0

    def flat(alpha: np.ndarray) -> np.ndarray:
        u = solve_tv(TVProblem(stack, alpha=alpha[:, None, None] * np.ones_like(stack)), cfg).u
        return np.std(u, axis=(-2, -1)) <= flat_tol

    if not np.all(flat(hi)):
        raise ValueError("upper bracket does not give a constant solution")
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        ok = flat(mid)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return float(hi[0]) if single else hi


def synthetic_pair(n: int = 256, seed: int = 0, sigma_left: float = 0.1, sigma_right: float = 0.02) -> TrainingPair:
    """Piecewise-smooth test image with stronger noise on the left half.

    The clean image is a ramp with a bright disc, a dark rectangle and an
    oscillating band along the bottom; noise is Gaussian with standard
    deviation ``sigma_left`` for ``x < 1/2`` and ``sigma_right`` elsewhere.
    """
    from .image_io import add_gaussian_noise

    y, x = np.mgrid[0:n, 0:n] / n
    clean = 0.3 + 0.3 * x
    clean = clean + 0.25 * (np.hypot(x - 0.3, y - 0.3) < 0.17)
    clean = clean - 0.2 * ((np.abs(x - 0.72) < 0.12) & (np.abs(y - 0.62) < 0.2))
    clean = clean + 0.12 * np.sin(2 * np.pi * 6 * x) * (y > 0.75)
    clean = np.clip(clean, 0.0, 1.0)
    sigma_map = np.where(x < 0.5, sigma_left, sigma_right)
    noisy = add_gaussian_noise(clean, 1.0, seed, mask=sigma_map)
    return TrainingPair(clean, noisy)


def interface_experiment(
    height: int = 8,
    width: int = 64,
    alpha_low: float = 0.01,
    alpha_high: float = 0.1,
    mollify_k: float = 1.0,
    cfg: SolverConfig | None = None,
) -> dict:
    """Weighted TV on a smooth bump with a weight that jumps at ``x = 1/2``.

    The input is ``cos^2(pi (x - 1/2))`` (symmetric about the interface, so
    its own jump there is zero).  The regularization strength is
    ``alpha_low`` on the left half and ``alpha_high`` on the right.  Three
    outputs are compared:

    * ``fid``: unit regularization, fidelity ``1/alpha`` (same local
      trade-off, weight on the data term);
    * ``reg``: weight ``alpha`` directly on the TV term;
    * ``mollified``: the ``mollify_k``-Lipschitz lower envelope of ``alpha``.

    Returned are the jumps ``|u[:, W/2] - u[:, W/2-1]|`` (row maxima) and the
    transition location: the centroid, in units of the width, of
    ``|diff(u) - diff(u_fid)|``.
    """
    from .denoise_tv import TVProblem, solve_tv
    from .partition import mollify_lipschitz

    cfg = cfg or SolverConfig(tol=1e-10, max_iter=400_000, warn=False)
    x = (np.arange(width) + 0.5) / width
    f = np.tile(np.cos(np.pi * (x - 0.5)) ** 2, (height, 1))
    alpha = np.broadcast_to(np.where(x < 0.5, alpha_low, alpha_high), f.shape).copy()
    u_fid = solve_tv(TVProblem(f, alpha=1.0, lam=1.0 / alpha), cfg).u
    u_reg = solve_tv(TVProblem(f, alpha=alpha, lam=1.0), cfg).u
    u_mol = solve_tv(TVProblem(f, alpha=mollify_lipschitz(alpha, mollify_k), lam=1.0), cfg).u
    mid = width // 2

    def jump(u):
        return float(np.max(np.abs(u[:, mid] - u[:, mid - 1])))

    def centroid(u):
        s = np.abs(np.diff(u, axis=1) - np.diff(u_fid, axis=1)).sum(axis=0)
        # the difference between pixels k and k+1 sits on the edge at x = (k+1)/W
        return float((s * np.arange(1, width)).sum() / s.sum() / width)

    return {
        "jump_fid": jump(u_fid),
        "jump_reg": jump(u_reg),
        "jump_mollified": jump(u_mol),
        "centroid_reg": centroid(u_reg),
        "centroid_mollified": centroid(u_mol),
        "u_fid": u_fid,
        "u_reg": u_reg,
        "u_mollified": u_mol,
    }
