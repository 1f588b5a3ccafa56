"""Fused per-pixel PDHG and piggyback iterations (numba).

These mirror the numpy operators in :mod:`grid_ops` stencil for stencil;
``tests/test_kernels.py`` checks them against the reference path.  Arrays
are ``(B, H, W)`` for scalars and ``(C, B, H, W)`` for stacked fields.
``mode`` selects forward only (0), adjoint with the loss derivative in the
dual update (1), or in the primal update (2).  Batch items whose
``active`` flag is cleared are left untouched (they have converged).

Each step runs the adjoint passes before the forward ones: the adjoint
dual update needs the pre-projection point ``y + sigma K xb`` and the
primal-placement adjoint needs the previous primal iterate, both of which
the forward passes overwrite in place.  Items are independent, so the
batch loop is outermost and all ``n_steps`` iterations of one item run
back to back.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

FORWARD = 0
ADJOINT_DUAL = 1
ADJOINT_PRIMAL = 2


@njit(cache=True, inline="always")
def _grad_at(u, i, j, H, W):
    c = u[i, j]
    g1 = u[i, j + 1] - c if j < W - 1 else 0.0
    g2 = u[i + 1, j] - c if i < H - 1 else 0.0
    return g1, g2


@njit(cache=True, inline="always")
def _div_at(p0, p1, i, j, H, W):
    out = 0.0
    if j < W - 1:
        out += p0[i, j]
    if j > 0:
        out -= p0[i, j - 1]
    if i < H - 1:
        out += p1[i, j]
    if i > 0:
        out -= p1[i - 1, j]
    return out


# ---------------------------------------------------------------- TV


@njit(cache=True)
def _tv_dual_adj(xb, p0, p1, w, P0, P1, al, sigma):
    H, W = xb.shape
    for i in range(H):
        for j in range(W):
            g1, g2 = _grad_at(xb, i, j, H, W)
            z1 = p0[i, j] + sigma * g1
            z2 = p1[i, j] + sigma * g2
            e1, e2 = _grad_at(w, i, j, H, W)
            a1 = P0[i, j] + sigma * e1
            a2 = P1[i, j] + sigma * e2
            n = math.sqrt(z1 * z1 + z2 * z2)
            r = al[i, j]
            if n >= r:
                # Jacobian of z -> r z / |z| (outside branch, also on the sphere)
                s = r / n
                coef = (z1 * a1 + z2 * a2) / (n * n)
                a1 = s * (a1 - coef * z1)
                a2 = s * (a2 - coef * z2)
            P0[i, j] = a1
            P1[i, j] = a2


@njit(cache=True)
def _tv_dual(xb, p0, p1, al, sigma):
    H, W = xb.shape
    for i in range(H):
        for j in range(W):
            g1, g2 = _grad_at(xb, i, j, H, W)
            z1 = p0[i, j] + sigma * g1
            z2 = p1[i, j] + sigma * g2
            n = math.sqrt(z1 * z1 + z2 * z2)
            r = al[i, j]
            if n > r:
                s = r / n
                z1 *= s
                z2 *= s
            p0[i, j] = z1
            p1[i, j] = z2


@njit(cache=True)
def _tv_primal(x, xb, p0, p1, src, inv, tau, theta):
    """``x <- (x + tau div p + src) * inv`` with extrapolation into ``xb``."""
    H, W = x.shape
    for i in range(H):
        for j in range(W):
            xo = x[i, j]
            xn = (xo + tau * _div_at(p0, p1, i, j, H, W) + src[i, j]) * inv[i, j]
            x[i, j] = xn
            xb[i, j] = xn + theta * (xn - xo)


@njit(cache=True)
def _prox_terms(noisy, lam, tau, src, inv):
    """Fidelity prox as ``(v + src) * inv`` with ``src = 2 tau lam noisy``."""
    H, W = noisy.shape
    for i in range(H):
        for j in range(W):
            l2 = 2.0 * tau * lam[i, j]
            src[i, j] = l2 * noisy[i, j]
            inv[i, j] = 1.0 / (1.0 + l2)


@njit(cache=True)
def _adjoint_source(u_old, clean, tau, mode, out):
    """Loss-derivative source of the adjoint primal step (zero in dual placement)."""
    H, W = out.shape
    if mode == ADJOINT_PRIMAL:
        for i in range(H):
            for j in range(W):
                out[i, j] = -tau * (u_old[i, j] - clean[i, j])
    else:
        out[:, :] = 0.0


@njit(cache=True)
def _injected(Xb, x, clean, out):
    H, W = out.shape
    for i in range(H):
        for j in range(W):
            out[i, j] = Xb[i, j] + x[i, j] - clean[i, j]


@njit(cache=True)
def tv_steps(n_steps, x, xb, y, X, Xb, Y, noisy, clean, lam, alpha, tau, sigma, theta, mode, active):
    B, H, W = x.shape
    w = np.empty((H, W))
    src = np.empty((H, W))
    inv = np.empty((H, W))
    asrc = np.empty((H, W))
    for b in range(B):
        if not active[b]:
            continue
        _prox_terms(noisy[b], lam[b], tau, src, inv)
        for _ in range(n_steps):
            if mode != FORWARD:
                if mode == ADJOINT_DUAL:
                    _injected(Xb[b], x[b], clean[b], w)
                    _tv_dual_adj(xb[b], y[0, b], y[1, b], w, Y[0, b], Y[1, b], alpha[b], sigma)
                else:
                    _tv_dual_adj(xb[b], y[0, b], y[1, b], Xb[b], Y[0, b], Y[1, b], alpha[b], sigma)
            _tv_dual(xb[b], y[0, b], y[1, b], alpha[b], sigma)
            if mode != FORWARD:
                _adjoint_source(x[b], clean[b], tau, mode, asrc)
                _tv_primal(X[b], Xb[b], Y[0, b], Y[1, b], asrc, inv, tau, theta)
            _tv_primal(x[b], xb[b], y[0, b], y[1, b], src, inv, tau, theta)


# ---------------------------------------------------------------- TGV


# The TGV passes spell out K = (grad u - v, sym_grad v) and its adjoint per
# pixel: numba optimizes these stencils far better written inline than when
# factored into helpers returning tuples (measured 5-10x).


@njit(cache=True)
def _tgv_dual_adj(u, v1, v2, y0, y1, y2, y3, y4, wu, wv1, wv2, Y0, Y1, Y2, Y3, Y4, a0, a1, sigma):
    H, W = u.shape
    for i in range(H):
        for j in range(W):
            k1 = -v1[i, j]
            k2 = -v2[i, j]
            if j < W - 1:
                k1 += u[i, j + 1] - u[i, j]
            if i < H - 1:
                k2 += u[i + 1, j] - u[i, j]
            c11 = 0.0
            c22 = 0.0
            c12 = 0.0
            if j >= 1 and j <= W - 2:
                c11 = v1[i, j] - v1[i, j - 1]
            if i >= 1 and i <= H - 2:
                c22 = v2[i, j] - v2[i - 1, j]
            if i <= H - 2 and j <= W - 2:
                c12 = 0.5 * (v1[i + 1, j] - v1[i, j] + v2[i, j + 1] - v2[i, j])
            z1 = y0[i, j] + sigma * k1
            z2 = y1[i, j] + sigma * k2
            zq11 = y2[i, j] + sigma * c11
            zq12 = y3[i, j] + sigma * c12
            zq22 = y4[i, j] + sigma * c22
            e1 = -wv1[i, j]
            e2 = -wv2[i, j]
            if j < W - 1:
                e1 += wu[i, j + 1] - wu[i, j]
            if i < H - 1:
                e2 += wu[i + 1, j] - wu[i, j]
            f11 = 0.0
            f22 = 0.0
            f12 = 0.0
            if j >= 1 and j <= W - 2:
                f11 = wv1[i, j] - wv1[i, j - 1]
            if i >= 1 and i <= H - 2:
                f22 = wv2[i, j] - wv2[i - 1, j]
            if i <= H - 2 and j <= W - 2:
                f12 = 0.5 * (wv1[i + 1, j] - wv1[i, j] + wv2[i, j + 1] - wv2[i, j])
            b1 = Y0[i, j] + sigma * e1
            b2 = Y1[i, j] + sigma * e2
            n = math.sqrt(z1 * z1 + z2 * z2)
            r0 = a0[i, j]
            if n >= r0:
                s = r0 / n
                coef = (z1 * b1 + z2 * b2) / (n * n)
                b1 = s * (b1 - coef * z1)
                b2 = s * (b2 - coef * z2)
            Y0[i, j] = b1
            Y1[i, j] = b2
            b11 = Y2[i, j] + sigma * f11
            b12 = Y3[i, j] + sigma * f12
            b22 = Y4[i, j] + sigma * f22
            nq = math.sqrt(zq11 * zq11 + 2.0 * zq12 * zq12 + zq22 * zq22)
            r1 = a1[i, j]
            if nq >= r1:
                s = r1 / nq
                # the symmetric-tensor inner product counts the off-diagonal twice
                coef = (zq11 * b11 + 2.0 * zq12 * b12 + zq22 * b22) / (nq * nq)
                b11 = s * (b11 - coef * zq11)
                b12 = s * (b12 - coef * zq12)
                b22 = s * (b22 - coef * zq22)
            Y2[i, j] = b11
            Y3[i, j] = b12
            Y4[i, j] = b22


@njit(cache=True)
def _tgv_dual(u, v1, v2, y0, y1, y2, y3, y4, a0, a1, sigma):
    H, W = u.shape
    for i in range(H):
        for j in range(W):
            k1 = -v1[i, j]
            k2 = -v2[i, j]
            if j < W - 1:
                k1 += u[i, j + 1] - u[i, j]
            if i < H - 1:
                k2 += u[i + 1, j] - u[i, j]
            c11 = 0.0
            c22 = 0.0
            c12 = 0.0
            if j >= 1 and j <= W - 2:
                c11 = v1[i, j] - v1[i, j - 1]
            if i >= 1 and i <= H - 2:
                c22 = v2[i, j] - v2[i - 1, j]
            if i <= H - 2 and j <= W - 2:
                c12 = 0.5 * (v1[i + 1, j] - v1[i, j] + v2[i, j + 1] - v2[i, j])
            z1 = y0[i, j] + sigma * k1
            z2 = y1[i, j] + sigma * k2
            zq11 = y2[i, j] + sigma * c11
            zq12 = y3[i, j] + sigma * c12
            zq22 = y4[i, j] + sigma * c22
            np_ = math.sqrt(z1 * z1 + z2 * z2)
            nq = math.sqrt(zq11 * zq11 + 2.0 * zq12 * zq12 + zq22 * zq22)
            r0 = a0[i, j]
            r1 = a1[i, j]
            sp = r0 / np_ if np_ > r0 else 1.0
            sq = r1 / nq if nq > r1 else 1.0
            y0[i, j] = z1 * sp
            y1[i, j] = z2 * sp
            y2[i, j] = zq11 * sq
            y3[i, j] = zq12 * sq
            y4[i, j] = zq22 * sq


@njit(cache=True)
def _tgv_primal(u, v1, v2, ub, v1b, v2b, y0, y1, y2, y3, y4, src, inv, tau, theta):
    """Primal step: prox on ``u`` as ``(w + src) * inv``, plain step on ``v``."""
    H, W = u.shape
    for i in range(H):
        for j in range(W):
            uo = u[i, j]
            v1o = v1[i, j]
            v2o = v2[i, j]
            # div p, then the v-components of p + div2 q
            d = 0.0
            a = y0[i, j]
            c = y1[i, j]
            if j < W - 1:
                d += a
            if j > 0:
                d -= y0[i, j - 1]
            if i < H - 1:
                d += c
            if i > 0:
                d -= y1[i - 1, j]
            un = (uo + tau * d + src[i, j]) * inv[i, j]
            if j <= W - 3:
                a += y2[i, j + 1]
            if 1 <= j and j <= W - 2:
                a -= y2[i, j]
            if i <= H - 2 and j <= W - 2:
                a += y3[i, j]
                c += y3[i, j]
            if i >= 1 and j <= W - 2:
                a -= y3[i - 1, j]
            if i <= H - 2 and j >= 1:
                c -= y3[i, j - 1]
            if i <= H - 3:
                c += y4[i + 1, j]
            if 1 <= i and i <= H - 2:
                c -= y4[i, j]
            v1n = v1o + tau * a
            v2n = v2o + tau * c
            u[i, j] = un
            v1[i, j] = v1n
            v2[i, j] = v2n
            ub[i, j] = un + theta * (un - uo)
            v1b[i, j] = v1n + theta * (v1n - v1o)
            v2b[i, j] = v2n + theta * (v2n - v2o)


@njit(cache=True)
def tgv_steps(
    n_steps, x, xb, y, X, Xb, Y, noisy, clean, lam, alpha0, alpha1, tau, sigma, theta, mode, active
):
    _, B, H, W = x.shape
    w = np.empty((H, W))
    src = np.empty((H, W))
    inv = np.empty((H, W))
    asrc = np.empty((H, W))
    for b in range(B):
        if not active[b]:
            continue
        u, v1, v2 = x[0, b], x[1, b], x[2, b]
        ub, v1b, v2b = xb[0, b], xb[1, b], xb[2, b]
        y0, y1, y2, y3, y4 = y[0, b], y[1, b], y[2, b], y[3, b], y[4, b]
        a0, a1 = alpha0[b], alpha1[b]
        _prox_terms(noisy[b], lam[b], tau, src, inv)
        for _ in range(n_steps):
            if mode != FORWARD:
                if mode == ADJOINT_DUAL:
                    _injected(Xb[0, b], u, clean[b], w)
                    wu = w
                else:
                    wu = Xb[0, b]
                _tgv_dual_adj(
                    ub, v1b, v2b, y0, y1, y2, y3, y4, wu, Xb[1, b], Xb[2, b],
                    Y[0, b], Y[1, b], Y[2, b], Y[3, b], Y[4, b], a0, a1, sigma,
                )
            _tgv_dual(ub, v1b, v2b, y0, y1, y2, y3, y4, a0, a1, sigma)
            if mode != FORWARD:
                _adjoint_source(u, clean[b], tau, mode, asrc)
                _tgv_primal(
                    X[0, b], X[1, b], X[2, b], Xb[0, b], Xb[1, b], Xb[2, b],
                    Y[0, b], Y[1, b], Y[2, b], Y[3, b], Y[4, b], asrc, inv, tau, theta,
                )
            _tgv_primal(u, v1, v2, ub, v1b, v2b, y0, y1, y2, y3, y4, src, inv, tau, theta)
