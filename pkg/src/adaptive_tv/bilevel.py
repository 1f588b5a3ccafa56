"""Per-cell learning of the scalar fidelity weight.

The lower-level problem is TV or TGV denoising with fidelity weight
``lam``; the upper-level loss is ``0.5 * |u(lam) - clean|^2``.  Its
derivative comes from piggyback iterations: adjoint variables run in
lockstep with PDHG, driven by the linearized projections and prox.

Everything here accepts a leading batch axis: ``clean``/``noisy`` of shape
``(B, h, w)`` with ``lam`` of shape ``(B,)`` treats the ``B`` cells as
independent problems sharing the iteration count.
"""

from __future__ import annotations

import json
import logging
import sys
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import metrics
from .denoise_tgv import TGVOperator
from .denoise_tv import TVOperator
from .partition import BoxConstraint
from .primal_dual import (
    AdjointDivergenceError,
    ConvergenceWarning,
    SolverConfig,
    iterate,
    run_pdhg,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingPair:
    clean: np.ndarray
    noisy: np.ndarray

    def __post_init__(self):
        clean = np.asarray(self.clean, dtype=float)
        noisy = np.asarray(self.noisy, dtype=float)
        if clean.shape != noisy.shape:
            raise ValueError(f"clean {clean.shape} and noisy {noisy.shape} differ in shape")
        if clean.ndim < 2:
            raise ValueError("images must be at least 2-D")
        object.__setattr__(self, "clean", clean)
        object.__setattr__(self, "noisy", noisy)

    def crop(self, rows: slice, cols: slice) -> TrainingPair:
        return TrainingPair(self.clean[..., rows, cols], self.noisy[..., rows, cols])


@dataclass(frozen=True)
class Regularizer:
    """Lower-level regularizer: ``tv`` uses ``alpha0`` as the dual radius."""

    kind: Literal["tv", "tgv"] = "tv"
    alpha0: float = 1.0
    alpha1: float = 1.0

    def __post_init__(self):
        if self.kind not in ("tv", "tgv"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.alpha0 <= 0 or self.alpha1 <= 0:
            raise ValueError("regularizer weights must be positive")

    def operator(self):
        if self.kind == "tv":
            return TVOperator(self.alpha0)
        return TGVOperator(self.alpha0, self.alpha1)


@dataclass
class PiggybackResult:
    u: np.ndarray
    U: np.ndarray
    loss: float | np.ndarray
    grad: float | np.ndarray
    iterations: int
    residual: float
    converged: bool
    x: np.ndarray
    y: np.ndarray
    X: np.ndarray | None = None
    Y: np.ndarray | None = None


def _per_item(values: np.ndarray):
    return float(values) if np.ndim(values) == 0 else values


def _lam_field(lam, shape) -> np.ndarray | float:
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        return float(lam)
    # one value per batch item, broadcast over the trailing image axes
    return lam.reshape(lam.shape + (1, 1))


def training_loss(u, clean):
    """``0.5 * sum (u - clean)^2`` over the image axes."""
    return _per_item(0.5 * np.sum((np.asarray(u) - clean) ** 2, axis=(-2, -1)))


def piggyback_solve(
    pair: TrainingPair,
    lam,
    regularizer: Regularizer = Regularizer(),
    cfg: SolverConfig | None = None,
    placement: Literal["dual", "primal"] = "dual",
    x0: np.ndarray | None = None,
    y0: np.ndarray | None = None,
    X0: np.ndarray | None = None,
    Y0: np.ndarray | None = None,
) -> PiggybackResult:
    """Solve the lower-level problem and its adjoint; return loss and ``dL/dlam``.

    ``placement="dual"`` injects the loss derivative through ``K`` in the dual
    adjoint update.  Its fixed point satisfies ``X + (u - clean) =
    (du/dnoisy)(u - clean)``, and since ``u`` solves a problem homogeneous in
    the regularizer, ``dL/dlam = -(1/lam) sum (X + u - clean)(u - noisy)``.
    ``placement="primal"`` subtracts the derivative in the primal adjoint
    update instead, which yields ``dL/dlam = 2 sum X (u - noisy)``.
    ``x0``/``y0`` warm-start the forward iterates and ``X0``/``Y0`` the
    adjoints (default zero).  With ``cfg.adjoint_tol`` set, the run also
    waits for the adjoint to settle, which matters after a warm start: the
    forward part may then converge long before a fresh adjoint has.
    """
    if placement not in ("dual", "primal"):
        raise ValueError(f"unknown placement {placement!r}")
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr <= 0):
        raise ValueError("lam must be positive")
    res = iterate(
        regularizer.operator(),
        pair.noisy,
        _lam_field(lam_arr, pair.noisy.shape),
        cfg or SolverConfig(),
        x0=x0,
        y0=y0,
        clean=pair.clean,
        mode=placement,
        X0=X0,
        Y0=Y0,
    )
    u = res.x[0]
    U = res.X[0]
    resid = u - pair.noisy
    if placement == "dual":
        grad = -np.sum((U + u - pair.clean) * resid, axis=(-2, -1)) / lam_arr
    else:
        grad = 2.0 * np.sum(U * resid, axis=(-2, -1))
    return PiggybackResult(
        u=u,
        U=U,
        loss=training_loss(u, pair.clean),
        grad=_per_item(grad),
        iterations=res.iterations,
        residual=res.residual,
        converged=res.converged,
        x=res.x,
        y=res.y,
        X=res.X,
        Y=res.Y,
    )


def lower_level_solve(
    pair: TrainingPair,
    lam,
    regularizer: Regularizer = Regularizer(),
    cfg: SolverConfig | None = None,
):
    """Forward solve only; returns the PDHG result for ``pair.noisy`` at ``lam``."""
    op = regularizer.operator()
    return run_pdhg(op, pair.noisy, _lam_field(lam, pair.noisy.shape), cfg or SolverConfig())


@dataclass(frozen=True)
class BilevelConfig:
    """Outer gradient loop for one cell's fidelity weight.

    ``step_rule="damped"`` is the plain scheme: ``lam <- clamp(lam - zeta g)``
    followed by ``zeta <- nu zeta``.  The default ``"adaptive"`` rule keeps
    the same update but accepts a step only if the training loss does not
    increase, doubling ``zeta`` after an accepted step and quartering it
    after a rejected one; this crosses the flat ends of the loss curve
    (where the gradient vanishes) in a few steps and never ends above the
    starting loss.  The loop stops once a step moves ``lam`` by at most
    ``max(tol, rel_tol * lam)``.  With the adaptive rule and ``init_step``
    set, each cell's first ``zeta`` is rescaled so that the first proposal
    moves ``lam`` by ``init_step * lam``; gradients differ by orders of
    magnitude between cells, and a fixed first step can be too small to
    leave the starting point.  If the final denoised cell lies within
    ``plateau_tol`` (sup norm, relative to the data range) of the data's
    projection onto the regularizer's kernel (its mean for TV, its affine
    fit for TGV), every smaller weight gives that same solution and loss;
    the tie is then resolved towards the lower box bound, as in
    :func:`~adaptive_tv.validation.lambda_grid_search`.  ``log_space`` applies the update to ``log lam`` with the
    chain-rule gradient ``lam g``.
    """

    lambda0: float = 1.0
    zeta: float = 1.0
    nu: float = 0.9
    tol: float = 1e-4
    rel_tol: float = 0.0
    max_outer: int = 50
    box: BoxConstraint = field(default_factory=BoxConstraint)
    step_rule: Literal["adaptive", "damped"] = "adaptive"
    log_space: bool = False
    init_step: float | None = 0.5
    plateau_tol: float | None = 1e-6

    def __post_init__(self):
        if self.lambda0 <= 0 or self.zeta <= 0 or self.tol <= 0:
            raise ValueError("lambda0, zeta and tol must be positive")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be non-negative")
        if self.plateau_tol is not None and self.plateau_tol < 0:
            raise ValueError("plateau_tol must be non-negative")
        if self.init_step is not None and self.init_step <= 0:
            raise ValueError("init_step must be positive")
        if not 0.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (0, 1]")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if self.step_rule not in ("adaptive", "damped"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class OptimizeResult:
    """Per-cell outcome; array fields when several cells were optimized together."""

    lambda_star: float | np.ndarray
    cost: float | np.ndarray
    trace: list
    u: np.ndarray
    converged: bool | np.ndarray
    warnings: list = field(default_factory=list)


def kernel_projection(noisy: np.ndarray, kind: str) -> np.ndarray:
    """Per-item solution for weights below the flatness threshold: the mean (TV) or affine fit (TGV)."""
    noisy = np.asarray(noisy, dtype=float)
    if kind == "tv":
        return np.broadcast_to(noisy.mean(axis=(-2, -1), keepdims=True), noisy.shape).copy()
    flat = noisy.reshape(-1, *noisy.shape[-2:])
    return np.stack([metrics.affine_project(f) for f in flat]).reshape(noisy.shape)


def _step(lam, grad, zeta, box: BoxConstraint, log_space: bool):
    if log_space:
        return box.clamp(np.exp(np.log(lam) - zeta * lam * grad))
    return box.clamp(lam - zeta * grad)


def optimize_lambda_batch(
    pair: TrainingPair,
    regularizer: Regularizer = Regularizer(),
    bcfg: BilevelConfig | None = None,
    cfg: SolverConfig | None = None,
    lambda0=None,
    verbose: bool = False,
    stream=None,
    placement: Literal["dual", "primal"] = "dual",
) -> OptimizeResult:
    """Optimize the fidelity weight independently on each of ``B`` equally sized cells.

    ``pair`` holds ``(B, h, w)`` stacks; ``lambda0`` (scalar or ``(B,)``)
    overrides ``bcfg.lambda0`` and is clamped into the box.  Cells that
    finish early drop out of the batch.  Returns ``lambda_star``, the costs
    ``|u - clean|^2`` at ``lambda_star`` and a trace of dicts
    ``{cell, k, lambda, loss, grad, accepted}``.
    """
    bcfg = bcfg or BilevelConfig()
    cfg = cfg or SolverConfig()
    clean = np.asarray(pair.clean, dtype=float)
    noisy = np.asarray(pair.noisy, dtype=float)
    if clean.ndim != 3:
        raise ValueError("batched pairs must have shape (B, h, w)")
    B = clean.shape[0]
    box = bcfg.box
    lam = box.clamp(np.broadcast_to(np.asarray(bcfg.lambda0 if lambda0 is None else lambda0, dtype=float), (B,)).copy())
    zeta = np.full(B, bcfg.zeta)
    warn_msgs: list[str] = []
    trace: list[dict] = []

    def emit(rec):
        trace.append(rec)
        if verbose:
            print(json.dumps(rec), file=stream if stream is not None else sys.stderr)

    def solve(idx, lam_vals, state=None):
        sub = TrainingPair(clean[idx], noisy[idx])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            try:
                warm = {} if state is None else dict(zip(("x0", "y0", "X0", "Y0"), (a[:, idx] for a in state)))
                res = piggyback_solve(sub, lam_vals, regularizer, cfg, placement=placement, **warm)
            except AdjointDivergenceError as exc:
                warn_msgs.append(f"cells {idx.tolist()}: {exc}")
                return None
        for w in caught:
            warn_msgs.append(f"cells {idx.tolist()}: {w.message}")
        return res

    # current accepted state per cell
    loss = np.empty(B)
    grad = np.empty(B)
    u = np.empty_like(noisy)
    all_idx = np.arange(B)
    res = solve(all_idx, lam)
    if res is None:
        # no usable gradient: report the initial guess with its forward cost
        fwd = lower_level_solve(pair, lam, regularizer, replace(cfg, warn=False))
        u = fwd.x[0]
        cost = 2.0 * np.atleast_1d(training_loss(u, clean))
        return OptimizeResult(lam, cost, trace, u, np.zeros(B, dtype=bool), warn_msgs)
    loss[:] = np.atleast_1d(res.loss)
    grad[:] = np.atleast_1d(res.grad)
    u[:] = res.u
    # accepted solver state per cell: forward and adjoint iterates, reused as warm starts
    state = [res.x.copy(), res.y.copy(), res.X.copy(), res.Y.copy()]
    if bcfg.step_rule == "adaptive" and bcfg.init_step is not None:
        slope = np.abs(lam * grad) if bcfg.log_space else np.abs(grad)
        scale = lam * bcfg.init_step if not bcfg.log_space else np.full(B, bcfg.init_step)
        zeta = np.where(slope > 0, scale / np.where(slope > 0, slope, 1.0), zeta)
    for b in range(B):
        emit({"cell": int(b), "k": 0, "lambda": float(lam[b]), "loss": float(loss[b]), "grad": float(grad[b]), "accepted": True})

    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    for k in range(1, bcfg.max_outer + 1):
        idx = all_idx[active]
        if idx.size == 0:
            break
        prop = _step(lam[idx], grad[idx], zeta[idx], box, bcfg.log_space)
        moved = np.abs(prop - lam[idx])
        # a step that cannot move (tiny, or pinned against the box) ends the loop
        stuck = moved <= np.maximum(bcfg.tol, bcfg.rel_tol * lam[idx])
        if bcfg.step_rule == "adaptive" and np.any(stuck):
            converged[idx[stuck]] = True
            active[idx[stuck]] = False
            idx, prop = idx[~stuck], prop[~stuck]
            if idx.size == 0:
                break
        res = solve(idx, prop, state)
        if res is None:
            active[idx] = False
            continue
        new_loss = np.atleast_1d(res.loss)
        new_grad = np.atleast_1d(res.grad)
        if bcfg.step_rule == "damped":
            accept = np.ones(idx.size, dtype=bool)
            zeta[idx] *= bcfg.nu
        else:
            accept = new_loss <= loss[idx]
            zeta[idx] = np.where(accept, 2.0 * zeta[idx], 0.25 * zeta[idx])
        for n, b in enumerate(idx):
            emit({"cell": int(b), "k": k, "lambda": float(prop[n]), "loss": float(new_loss[n]),
                  "grad": float(new_grad[n]), "accepted": bool(accept[n])})
        acc = idx[accept]
        step_len = np.abs(prop[accept] - lam[acc])
        lam[acc] = prop[accept]
        loss[acc] = new_loss[accept]
        grad[acc] = new_grad[accept]
        u[acc] = res.u[accept]
        for dst, src in zip(state, (res.x, res.y, res.X, res.Y)):
            dst[:, acc] = src[:, accept]
        # |lam_k - lam_{k-1}| <= tol on an accepted step
        done = acc[step_len <= np.maximum(bcfg.tol, bcfg.rel_tol * lam[acc])]
        converged[done] = True
        active[done] = False
    else:
        if np.any(active):
            warn_msgs.append(f"cells {all_idx[active].tolist()}: outer loop hit max_outer={bcfg.max_outer}")

    if bcfg.plateau_tol is not None:
        proj = kernel_projection(noisy, regularizer.kind)
        scale = np.maximum(1.0, np.abs(noisy).max(axis=(-2, -1)))
        flat = (np.abs(u - proj).max(axis=(-2, -1)) <= bcfg.plateau_tol * scale) & (lam > box.lower)
        for b in all_idx[flat]:
            lam[b] = box.lower
            u[b] = proj[b]
            loss[b] = training_loss(proj[b], clean[b])
            k_next = sum(1 for rec in trace if rec["cell"] == b)
            emit({"cell": int(b), "k": k_next, "lambda": float(lam[b]), "loss": float(loss[b]), "grad": 0.0,
                  "accepted": True, "plateau": True})

    return OptimizeResult(
        lambda_star=lam,
        cost=2.0 * loss,
        trace=trace,
        u=u,
        converged=converged,
        warnings=warn_msgs,
    )


def optimize_lambda(
    pair: TrainingPair,
    regularizer: Regularizer = Regularizer(),
    bcfg: BilevelConfig | None = None,
    cfg: SolverConfig | None = None,
    verbose: bool = False,
    stream=None,
    placement: Literal["dual", "primal"] = "dual",
) -> OptimizeResult:
    """Learn the scalar fidelity weight on one cell (single ``(h, w)`` pair)."""
    if pair.clean.ndim != 2:
        raise ValueError("optimize_lambda expects a single (h, w) pair; use optimize_lambda_batch")
    batched = TrainingPair(pair.clean[None], pair.noisy[None])
    out = optimize_lambda_batch(batched, regularizer, bcfg, cfg, verbose=verbose, stream=stream, placement=placement)
    for rec in out.trace:
        rec.pop("cell", None)
    return OptimizeResult(
        lambda_star=float(out.lambda_star[0]),
        cost=float(out.cost[0]),
        trace=out.trace,
        u=out.u[0],
        converged=bool(out.converged[0]),
        warnings=out.warnings,
    )
