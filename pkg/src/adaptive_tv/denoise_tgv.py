"""Second-order TGV denoising with a scalar or spatial fidelity weight.

Solves ``min_{u,v} sum lam (u - noisy)^2 + alpha0 sum |grad u - v|
+ alpha1 sum |sym_grad v|`` by PDHG on the stacked primal ``(u, v)`` and
dual ``(p, q)``.  ``alpha0``/``alpha1`` may be per-pixel maps, but only the
fidelity weight is spatially adapted by the learning scheme; regularizer
maps are experimental.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid_ops
from .denoise_tv import _positive, _project_ball_jvp, flat_weight, project_dual_tv
from .primal_dual import SolverConfig, run_pdhg

__all__ = [
    "TGVOperator",
    "TGVProblem",
    "TGVResult",
    "energy_tgv",
    "project_dual_tgv",
    "solve_tgv",
]


@dataclass(frozen=True)
class TGVProblem:
    noisy: np.ndarray
    alpha0: np.ndarray | float = 1.0
    alpha1: np.ndarray | float = 1.0
    lam: np.ndarray | float = 1.0

    def __post_init__(self):
        noisy = np.asarray(self.noisy, dtype=float)
        if noisy.ndim < 2 or not np.all(np.isfinite(noisy)):
            raise ValueError("noisy image must be a finite array with at least 2 dimensions")
        object.__setattr__(self, "noisy", noisy)
        for name in ("alpha0", "alpha1", "lam"):
            object.__setattr__(self, name, _positive(name, getattr(self, name)))


def project_dual_tgv(p: np.ndarray, q: np.ndarray, alpha0, alpha1) -> tuple[np.ndarray, np.ndarray]:
    """Pixelwise projection of ``p`` onto ``|p| <= alpha0`` and ``q`` onto ``|q|_w <= alpha1``."""
    q_norm = grid_ops.tensor_norm(q)
    q_scale = np.minimum(1.0, alpha1 / np.maximum(q_norm, 1e-300))
    return project_dual_tv(p, alpha0), q * q_scale


class TGVOperator:
    """K = [[grad, -Id], [0, sym_grad]] acting on ``x = (u, v1, v2)``."""

    kernel = "tgv"
    n_primal = 3
    n_dual = 5
    norm_bound = grid_ops.TGV_NORM_BOUND

    def __init__(self, alpha0=1.0, alpha1=1.0):
        self.alpha0 = alpha0
        self.alpha1 = alpha1

    def radii(self):
        return self.alpha0, self.alpha1

    def flattened(self, shape, flat) -> TGVOperator:
        return TGVOperator(flat_weight(self.alpha0, shape, flat), flat_weight(self.alpha1, shape, flat))

    def K(self, x):
        p, q = grid_ops.tgv_forward(x[0], x[1:])
        return np.concatenate([p, q])

    def Kt(self, y):
        a, b = grid_ops.tgv_adjoint(y[:2], y[2:])
        return np.concatenate([a[None], b])

    def project(self, z):
        p, q = project_dual_tgv(z[:2], z[2:], self.alpha0, self.alpha1)
        return np.concatenate([p, q])

    def project_jvp(self, z, dz):
        p, q = z[:2], z[2:]
        dp, dq = dz[:2], dz[2:]
        out_p = _project_ball_jvp(
            p, dp, grid_ops.pointwise_norm(p), self.alpha0, p[0] * dp[0] + p[1] * dp[1]
        )
        inner_q = q[0] * dq[0] + 2.0 * q[1] * dq[1] + q[2] * dq[2]
        out_q = _project_ball_jvp(q, dq, grid_ops.tensor_norm(q), self.alpha1, inner_q)
        return np.concatenate([out_p, out_q])


@dataclass
class TGVResult:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray
    iterations: int
    residual: float
    converged: bool
    energy: float | np.ndarray

    @property
    def warning(self) -> bool:
        return not self.converged


def energy_tgv(u: np.ndarray, v: np.ndarray, problem: TGVProblem):
    """Primal energy at a given ``(u, v)``; an upper bound for the TGV energy of ``u``."""
    u = np.asarray(u, dtype=float)
    p, q = grid_ops.tgv_forward(u, np.asarray(v, dtype=float))
    total = (
        np.sum(problem.lam * (u - problem.noisy) ** 2, axis=(-2, -1))
        + np.sum(problem.alpha0 * grid_ops.pointwise_norm(p), axis=(-2, -1))
        + np.sum(problem.alpha1 * grid_ops.tensor_norm(q), axis=(-2, -1))
    )
    return float(total) if np.ndim(total) == 0 else total


def solve_tgv(
    problem: TGVProblem,
    cfg: SolverConfig | None = None,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
) -> TGVResult:
    """Denoise with PDHG from ``u = noisy``, ``v = 0``, zero duals unless warm-started."""
    cfg = cfg or SolverConfig()
    op = TGVOperator(problem.alpha0, problem.alpha1)
    res = run_pdhg(op, problem.noisy, problem.lam, cfg, x0=x0, y0=y0)
    u, v = res.x[0], res.x[1:]
    return TGVResult(
        u=u,
        v=v,
        p=res.y[:2],
        q=res.y[2:],
        iterations=res.iterations,
        residual=res.residual,
        converged=res.converged,
        energy=energy_tgv(u, v, problem),
    )
