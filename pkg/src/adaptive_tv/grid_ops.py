"""Finite-difference operators on regular pixel grids.

Arrays follow the layout ``(..., H, W)``: any leading axes are treated as a
batch of independent images.  Vector fields stack their two components on a
new leading axis, ``(2, ..., H, W)`` with component 0 the horizontal
(column) derivative and component 1 the vertical (row) derivative.
Symmetric tensor fields use ``(3, ..., H, W)`` ordered ``(c11, c12, c22)``;
their inner product counts the off-diagonal entry twice.

The gradient uses forward differences with a zero last column/row.  The
symmetrized gradient is discretized on the matching staggered grid: the
horizontal component of a gradient lives between columns ``j`` and ``j+1``,
so its horizontal difference is a backward difference over interior
columns, while the mixed entry is a forward difference restricted to pixels
where both components are defined.  With this choice the symmetrized
gradient of the gradient of any affine image vanishes identically, so
affine images lie in the kernel of discrete TGV.
"""

from __future__ import annotations

import math
from typing import Literal

import numpy as np

TV_NORM_BOUND = math.sqrt(8.0)
TGV_NORM_BOUND = math.sqrt((17.0 + math.sqrt(33.0)) / 2.0)


def grad(u: np.ndarray) -> np.ndarray:
    """Forward-difference gradient with Neumann boundary."""
    u = np.asarray(u, dtype=float)
    out = np.zeros((2,) + u.shape)
    out[0, ..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    out[1, ..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return out


def div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad`, so ``<grad u, p> = -<u, div p>``."""
    p = np.asarray(p, dtype=float)
    out = np.zeros(p.shape[1:])
    p1 = p[0, ..., :, :-1]
    p2 = p[1, ..., :-1, :]
    out[..., :, :-1] += p1
    out[..., :, 1:] -= p1
    out[..., :-1, :] += p2
    out[..., 1:, :] -= p2
    return out


def sym_grad(v: np.ndarray) -> np.ndarray:
    """Symmetrized gradient of a vector field, returned as ``(c11, c12, c22)``."""
    v = np.asarray(v, dtype=float)
    v1, v2 = v[0], v[1]
    out = np.zeros((3,) + v1.shape)
    out[0, ..., :, 1:-1] = v1[..., :, 1:-1] - v1[..., :, :-2]
    out[2, ..., 1:-1, :] = v2[..., 1:-1, :] - v2[..., :-2, :]
    out[1, ..., :-1, :-1] = 0.5 * (
        v1[..., 1:, :-1] - v1[..., :-1, :-1] + v2[..., :-1, 1:] - v2[..., :-1, :-1]
    )
    return out


def div2(q: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`sym_grad` under the weighted tensor inner product."""
    q = np.asarray(q, dtype=float)
    q11 = q[0, ..., :, 1:-1]
    q12 = q[1, ..., :-1, :-1]
    q22 = q[2, ..., 1:-1, :]
    out = np.zeros((2,) + q.shape[1:])
    # horizontal component: adjoint of the interior backward difference of v1
    out[0, ..., :, :-2] += q11
    out[0, ..., :, 1:-1] -= q11
    # mixed entry appears twice in the inner product and carries a factor 1/2
    out[0, ..., :-1, :-1] += q12
    out[0, ..., 1:, :-1] -= q12
    out[1, ..., :-1, :-1] += q12
    out[1, ..., :-1, 1:] -= q12
    out[1, ..., :-2, :] += q22
    out[1, ..., 1:-1, :] -= q22
    return out


def tensor_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of symmetric tensor fields, off-diagonal counted twice."""
    return float(np.sum(a[0] * b[0]) + 2.0 * np.sum(a[1] * b[1]) + np.sum(a[2] * b[2]))


def pointwise_norm(p: np.ndarray) -> np.ndarray:
    """Euclidean norm of a vector field at every pixel."""
    return np.sqrt(p[0] ** 2 + p[1] ** 2)


def tensor_norm(q: np.ndarray) -> np.ndarray:
    """Weighted Frobenius norm ``sqrt(c11^2 + 2 c12^2 + c22^2)`` at every pixel."""
    return np.sqrt(q[0] ** 2 + 2.0 * q[1] ** 2 + q[2] ** 2)


def tgv_forward(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply the TGV operator ``(u, v) -> (grad u - v, sym_grad v)``."""
    return grad(u) - v, sym_grad(v)


def tgv_adjoint(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of :func:`tgv_forward`: ``(p, q) -> (-div p, -p - div2 q)``."""
    return -div(p), -p - div2(q)


def op_norm_estimate(
    operator: Literal["tv", "tgv"],
    dims: tuple[int, int],
    n_iter: int = 200,
    seed: int = 0,
) -> float:
    """Estimate the spectral norm of the TV or TGV operator by power iteration.

    The estimate is a Rayleigh quotient of ``K^T K`` and therefore never
    exceeds the true norm, up to rounding.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be positive")
    h, w = dims
    rng = np.random.default_rng(seed)
    if operator == "tv":
        x = rng.standard_normal((h, w))

        def normal(z):
            return -div(grad(z))

    elif operator == "tgv":
        x = rng.standard_normal((3, h, w))

        def normal(z):
            p, q = tgv_forward(z[0], z[1:])
            a, b = tgv_adjoint(p, q)
            return np.concatenate([a[None], b])

    else:
        raise ValueError(f"unknown operator {operator!r}")

    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(n_iter):
        y = normal(x)
        est = float(np.vdot(x, y))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    return math.sqrt(max(est, 0.0))
