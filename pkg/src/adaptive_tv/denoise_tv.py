"""Total-variation denoising with spatially weighted regularizer or fidelity.

Solves ``min_u  sum lam (u - noisy)^2 + sum alpha |grad u|`` where both
``lam`` and ``alpha`` may be scalars or per-pixel maps.  Scalar ROF is
``lam = 1``; the weighted-regularizer model uses a map for ``alpha`` and the
weighted-fidelity model a map for ``lam`` with ``alpha = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid_ops
from .primal_dual import (
    ConvergenceWarning,
    SolverConfig,
    prox_fidelity,
    run_pdhg,
)

__all__ = [
    "ConvergenceWarning",
    "SolverConfig",
    "TVProblem",
    "TVResult",
    "TVOperator",
    "energy_tv",
    "project_dual_tv",
    "prox_fidelity",
    "solve_tv",
]


def _positive(name: str, value) -> np.ndarray | float:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} must be finite and strictly positive")
    return float(arr) if arr.ndim == 0 else arr


@dataclass(frozen=True)
class TVProblem:
    """Noisy image plus regularizer radii ``alpha`` and fidelity weight ``lam``."""

    noisy: np.ndarray
    alpha: np.ndarray | float = 1.0
    lam: np.ndarray | float = 1.0

    def __post_init__(self):
        noisy = np.asarray(self.noisy, dtype=float)
        if noisy.ndim < 2 or not np.all(np.isfinite(noisy)):
            raise ValueError("noisy image must be a finite array with at least 2 dimensions")
        object.__setattr__(self, "noisy", noisy)
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))
        object.__setattr__(self, "lam", _positive("lam", self.lam))
        for name in ("alpha", "lam"):
            w = getattr(self, name)
            if isinstance(w, np.ndarray):
                try:
                    np.broadcast_shapes(w.shape, noisy.shape)
                except ValueError:
                    raise ValueError(f"{name} shape {w.shape} does not match image {noisy.shape}")


def project_dual_tv(p: np.ndarray, radii) -> np.ndarray:
    """Project each pixel of ``p`` onto the disc of radius ``radii`` there."""
    norm = grid_ops.pointwise_norm(p)
    scale = np.minimum(1.0, radii / np.maximum(norm, 1e-300))
    return p * scale


def _project_ball_jvp(z, dz, norm, radius, weighted_inner):
    """Derivative of radial ball projection at ``z`` applied to ``dz``.

    Identity strictly inside the ball; on or outside the boundary, the
    Jacobian of ``r z / |z|``.
    """
    outside = norm >= radius
    safe = np.where(outside, norm, 1.0)
    coef = weighted_inner / (safe * safe)
    scale = np.where(outside, radius / safe, 1.0)
    radial = np.where(outside, coef, 0.0)
    return scale * (dz - radial * z)


def flat_weight(w, shape, flat) -> np.ndarray:
    """Broadcast a scalar or map to ``shape`` and reshape to the flat batch layout."""
    return np.array(np.broadcast_to(np.asarray(w, dtype=float), shape).reshape(flat), dtype=float, order="C")


class TVOperator:
    """K = grad with dual feasible set ``|p| <= alpha`` pixelwise."""

    kernel = "tv"
    n_primal = 1
    n_dual = 2
    norm_bound = grid_ops.TV_NORM_BOUND

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def radii(self):
        return (self.alpha,)

    def flattened(self, shape, flat) -> TVOperator:
        return TVOperator(flat_weight(self.alpha, shape, flat))

    def K(self, x):
        return grid_ops.grad(x[0])

    def Kt(self, y):
        return -grid_ops.div(y)[None]

    def project(self, z):
        return project_dual_tv(z, self.alpha)

    def project_jvp(self, z, dz):
        norm = grid_ops.pointwise_norm(z)
        inner = z[0] * dz[0] + z[1] * dz[1]
        return _project_ball_jvp(z, dz, norm, self.alpha, inner)


@dataclass
class TVResult:
    u: np.ndarray
    p: np.ndarray
    iterations: int
    residual: float
    converged: bool
    energy: float | np.ndarray

    @property
    def warning(self) -> bool:
        return not self.converged


def energy_tv(u: np.ndarray, problem: TVProblem):
    """Discrete primal energy ``sum lam (u - noisy)^2 + sum alpha |grad u|``.

    Sums run over the last two axes, so batched inputs give one value each.
    """
    u = np.asarray(u, dtype=float)
    fid = np.sum(problem.lam * (u - problem.noisy) ** 2, axis=(-2, -1))
    reg = np.sum(problem.alpha * grid_ops.pointwise_norm(grid_ops.grad(u)), axis=(-2, -1))
    total = fid + reg
    return float(total) if np.ndim(total) == 0 else total


def solve_tv(
    problem: TVProblem,
    cfg: SolverConfig | None = None,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
) -> TVResult:
    """Denoise with PDHG started from ``u = noisy``, ``p = 0`` unless warm-started."""
    cfg = cfg or SolverConfig()
    op = TVOperator(problem.alpha)
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape == problem.noisy.shape:
            x0 = x0[None]
    res = run_pdhg(op, problem.noisy, problem.lam, cfg, x0=x0, y0=y0)
    u = res.x[0]
    return TVResult(
        u=u,
        p=res.y,
        iterations=res.iterations,
        residual=res.residual,
        converged=res.converged,
        energy=energy_tv(u, problem),
    )

