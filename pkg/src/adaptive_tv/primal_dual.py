"""Shared primal-dual hybrid gradient loop for the denoising solvers.

Primal iterates carry a leading component axis whose entry 0 is the image
(TV: ``(1, ..., H, W)``; TGV: ``(3, ..., H, W)`` with the vector field in
entries 1-2).  Only the image component sees the quadratic fidelity term;
the remaining components have an identity proximal map.

The same loop optionally carries piggyback adjoint iterates ``(X, Y)``
that differentiate the solution with respect to the fidelity weight.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, replace
from typing import Literal, Protocol

import numpy as np

ADJOINT_LIMIT = 1e8


class ConvergenceWarning(RuntimeWarning):
    """A solver stopped at ``max_iter`` before meeting its tolerance."""


class AdjointDivergenceError(RuntimeError):
    """Adjoint iterates blew up; the hypergradient is meaningless."""


def _default_backend() -> str:
    if os.environ.get("ADAPTIVE_TV_BACKEND", "").lower() == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        return "numpy"
    return "numba"


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes and stopping rule for PDHG.

    ``tau`` and ``sigma`` default to ``1 / norm_bound``; ``norm_bound``
    defaults to the analytic bound of the operator being solved.  The run
    stops once the relative l2 change of the primal iterate over ``window``
    iterations drops to ``tol``; piggyback runs additionally wait for the
    adjoint iterate's relative change to drop to ``adjoint_tol`` (``None``:
    the adjoint simply runs as long as the primal).
    """

    tau: float | None = None
    sigma: float | None = None
    theta: float = 1.0
    max_iter: int = 2000
    tol: float = 1e-6
    norm_bound: float | None = None
    window: int = 10
    adjoint_tol: float | None = None
    warn: bool = True
    backend: Literal["auto", "numba", "numpy"] = "auto"

    def resolved(self, default_bound: float) -> SolverConfig:
        bound = self.norm_bound if self.norm_bound is not None else default_bound
        tau = self.tau if self.tau is not None else 1.0 / bound
        sigma = self.sigma if self.sigma is not None else 1.0 / bound
        backend = _default_backend() if self.backend == "auto" else self.backend
        cfg = replace(self, tau=tau, sigma=sigma, norm_bound=bound, backend=backend)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.adjoint_tol is not None and self.adjoint_tol <= 0:
            raise ValueError("adjoint_tol must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.backend not in ("auto", "numba", "numpy"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.tau is not None and self.sigma is not None and self.norm_bound is not None:
            if self.tau <= 0 or self.sigma <= 0:
                raise ValueError("step sizes must be positive")
            # slack for the rounding in (1/b) * (1/b) * b^2
            if self.tau * self.sigma * self.norm_bound**2 > 1.0 + 1e-12:
                raise ValueError("step sizes violate tau*sigma*||K||^2 <= 1")


class PrimalDualOperator(Protocol):
    kernel: str
    norm_bound: float
    n_primal: int
    n_dual: int

    def K(self, x: np.ndarray) -> np.ndarray: ...

    def Kt(self, y: np.ndarray) -> np.ndarray: ...

    def project(self, z: np.ndarray) -> np.ndarray: ...

    def project_jvp(self, z: np.ndarray, dz: np.ndarray) -> np.ndarray: ...

    def radii(self) -> tuple: ...


@dataclass
class PDHGResult:
    x: np.ndarray
    y: np.ndarray
    iterations: int
    residual: float
    converged: bool
    X: np.ndarray | None = None
    Y: np.ndarray | None = None
    adjoint_residual: float | None = None


def prox_fidelity(v, lam, noisy, tau: float) -> np.ndarray:
    """Resolvent of ``u -> lam * (u - noisy)^2`` with step ``tau``, pointwise."""
    return (v + 2.0 * tau * lam * noisy) / (1.0 + 2.0 * tau * lam)


def batch_norm(x: np.ndarray) -> np.ndarray:
    """l2 norm per batch element of a component-stacked field ``(C, ..., H, W)``."""
    return np.sqrt(np.sum(x * x, axis=(0, -2, -1)))


def relative_change_items(x: np.ndarray, x_old: np.ndarray) -> np.ndarray:
    """Relative l2 change per batch item (0 where both are zero)."""
    num = batch_norm(x - x_old)
    den = batch_norm(x)
    return np.where(num == 0.0, 0.0, num / np.maximum(den, 1e-300))


def relative_change(x: np.ndarray, x_old: np.ndarray) -> float:
    """Largest relative l2 change over the batch."""
    return float(np.max(relative_change_items(x, x_old)))


def initial_primal(op: PrimalDualOperator, noisy: np.ndarray) -> np.ndarray:
    x = np.zeros((op.n_primal,) + noisy.shape)
    x[0] = noisy
    return x


Mode = Literal["forward", "dual", "primal"]


def _numpy_steps(op, n, st, noisy, clean, lam, tau, sigma, theta, mode, active):
    frozen = None if active.all() else [a[:, ~active].copy() for a in st]
    x, xb, y, X, Xb, Y = st
    d = 1.0 / (1.0 + 2.0 * tau * lam)
    for _ in range(n):
        z = y + sigma * op.K(xb)
        y = op.project(z)
        if mode != "forward":
            dz = Xb.copy()
            if mode == "dual":
                dz[0] += x[0] - clean
            Y = op.project_jvp(z, Y + sigma * op.K(dz))
        x_old = x
        x = x - tau * op.Kt(y)
        x[0] = prox_fidelity(x[0], lam, noisy, tau)
        xb = x + theta * (x - x_old)
        if mode != "forward":
            X_old = X
            X = X - tau * op.Kt(Y)
            if mode == "primal":
                X[0] -= tau * (x_old[0] - clean)
            X[0] *= d
            Xb = X + theta * (X - X_old)
    out = [x, xb, y, X, Xb, Y]
    if frozen is not None:
        for a, keep in zip(out, frozen):
            if a.shape[1] == active.size:
                a[:, ~active] = keep
    return out


def _numba_steps(op, n, st, noisy, clean, lam, tau, sigma, theta, mode, active):
    from . import _kernels

    code = {"forward": _kernels.FORWARD, "dual": _kernels.ADJOINT_DUAL, "primal": _kernels.ADJOINT_PRIMAL}[mode]
    x, xb, y, X, Xb, Y = st
    if op.kernel == "tv":
        (alpha,) = op.radii()
        _kernels.tv_steps(
            n, x[0], xb[0], y, X[0], Xb[0], Y, noisy, clean, lam, alpha, tau, sigma, theta, code, active
        )
    else:
        alpha0, alpha1 = op.radii()
        _kernels.tgv_steps(
            n, x, xb, y, X, Xb, Y, noisy, clean, lam, alpha0, alpha1, tau, sigma, theta, code, active
        )
    return st


def iterate(
    op: PrimalDualOperator,
    noisy: np.ndarray,
    lam,
    cfg: SolverConfig,
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
    clean: np.ndarray | None = None,
    mode: Mode = "forward",
    X0: np.ndarray | None = None,
    Y0: np.ndarray | None = None,
) -> PDHGResult:
    """Run PDHG, with piggyback adjoints when ``mode`` is ``"dual"`` or ``"primal"``.

    ``noisy`` may carry leading batch axes; ``lam`` and the operator radii
    must broadcast against it.  Each batch item freezes once its primal
    (and, with ``cfg.adjoint_tol``, adjoint) relative change meets the
    tolerance; the run ends when all items have frozen.  Adjoints start from
    ``X0``/``Y0`` or zero.
    """
    cfg = cfg.resolved(op.norm_bound)
    if mode not in ("forward", "dual", "primal"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode != "forward" and clean is None:
        raise ValueError("adjoint modes need the clean image")
    noisy = np.asarray(noisy, dtype=float)
    shape = noisy.shape
    h, w = shape[-2:]
    batch = int(np.prod(shape[:-2], dtype=int))
    flat = (batch, h, w)

    def flat_field(a, comps):
        # fresh writable C-contiguous copies: the kernels update in place
        return np.array(np.broadcast_to(a, (comps,) + shape).reshape((comps,) + flat), dtype=float, order="C")

    def flat_scalar(a):
        return np.array(np.broadcast_to(np.asarray(a, dtype=float), shape).reshape(flat), dtype=float, order="C")

    noisy_f = flat_scalar(noisy)
    clean_f = noisy_f if clean is None else flat_scalar(clean)
    lam_f = flat_scalar(lam)
    if np.any(lam_f <= 0):
        raise ValueError("fidelity weight must be positive")

    x = flat_field(initial_primal(op, noisy) if x0 is None else x0, op.n_primal)
    y = np.zeros((op.n_dual,) + flat) if y0 is None else flat_field(y0, op.n_dual)
    xb = x.copy()
    adjoint = mode != "forward"
    if adjoint:
        X = np.zeros_like(x) if X0 is None else flat_field(X0, op.n_primal)
        Y = np.zeros_like(y) if Y0 is None else flat_field(Y0, op.n_dual)
    else:
        X = np.zeros((op.n_primal, 1, 1, 1))
        Y = np.zeros((op.n_dual, 1, 1, 1))
    Xb = X.copy()

    fop = op.flattened(shape, flat)
    steps = _numba_steps if cfg.backend == "numba" else _numpy_steps
    st = [x, xb, y, X, Xb, Y]
    # items freeze individually once they meet the tolerance
    active = np.ones(batch, dtype=np.bool_)
    item_res = np.full(batch, math.inf)
    adj_res = np.zeros(batch)
    check_adj = adjoint and cfg.adjoint_tol is not None
    converged = False
    it = 0
    while it < cfg.max_iter:
        n = min(cfg.window, cfg.max_iter - it)
        x_ref = st[0].copy()
        X_ref = st[3].copy() if check_adj else None
        st = steps(fop, n, st, noisy_f, clean_f, lam_f, cfg.tau, cfg.sigma, cfg.theta, mode, active)
        it += n
        item_res[active] = relative_change_items(st[0], x_ref)[active]
        if check_adj:
            adj_res[active] = relative_change_items(st[3], X_ref)[active]
        if adjoint:
            scale = float(np.max(np.abs(st[3])))
            if not math.isfinite(scale) or scale > ADJOINT_LIMIT:
                raise AdjointDivergenceError(
                    f"adjoint magnitude {scale:.3e} exceeded {ADJOINT_LIMIT:.0e} at iteration {it}"
                )
        if n == cfg.window:
            still = item_res > cfg.tol
            if check_adj:
                still |= adj_res > cfg.adjoint_tol
            active &= still
            if not active.any():
                converged = True
                break
    residual = float(np.max(item_res))

    if not converged and cfg.warn:
        extra = f", adjoint {float(np.max(adj_res)):.3e}" if check_adj else ""
        warnings.warn(
            f"PDHG stopped after {it} iterations with relative change {residual:.3e}{extra} (tol {cfg.tol:.1e})",
            ConvergenceWarning,
            stacklevel=3,
        )
    x, _, y, X, _, Y = st
    out = PDHGResult(
        x=x.reshape((op.n_primal,) + shape),
        y=y.reshape((op.n_dual,) + shape),
        iterations=it,
        residual=residual,
        converged=converged,
    )
    if adjoint:
        out.X = X.reshape((op.n_primal,) + shape)
        out.Y = Y.reshape((op.n_dual,) + shape)
        out.adjoint_residual = float(np.max(adj_res)) if check_adj else None
    return out


def run_pdhg(op, noisy, lam, cfg: SolverConfig, x0=None, y0=None) -> PDHGResult:
    """Forward PDHG for ``min_x lam |x_0 - noisy|^2 + F(K x)`` with ``F*`` an indicator."""
    return iterate(op, noisy, lam, cfg, x0=x0, y0=y0)
