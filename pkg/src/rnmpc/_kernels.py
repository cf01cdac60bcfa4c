"""Compiled Riccati kernels for the structured subproblem backend.

Conventions: stage cost ``1/2 [x;u]' W [x;u] + l'[x;u]``, value function
``1/2 x'P x + p'x``.  Linear terms carry one column per independent
right-hand side, so a whole ``n x n`` response block is processed at once.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def lq_factor(A, B, Wxx, Wxu, Wuu, WT, k0):
    """Backward Riccati factorisation for steps ``k0 .. T-1``.

    Stage weights are per step: ``Wxx`` (T, n, n), ``Wxu`` (T, n, m),
    ``Wuu`` (T, m, m).  Returns ``P`` (T+1, n, n), feedback ``K`` (T, m, n) and ``G^{-1}``
    (T, m, m); entries below ``k0`` are left zero.
    """
    T = A.shape[0]
    n = A.shape[1]
    m = B.shape[2]
    P = np.zeros((T + 1, n, n))
    K = np.zeros((T, m, n))
    Gi = np.zeros((T, m, m))
    P[T] = WT
    for k in range(T - 1, k0 - 1, -1):
        PA = P[k + 1] @ A[k]
        PB = P[k + 1] @ B[k]
        G = Wuu[k] + B[k].T @ PB
        H = Wxu[k].T + B[k].T @ PA
        Ginv = np.linalg.inv(G)
        Kk = -(Ginv @ H)
        Pk = Wxx[k] + A[k].T @ PA + H.T @ Kk
        P[k] = 0.5 * (Pk + Pk.T)
        K[k] = Kk
        Gi[k] = Ginv
    return P, K, Gi


@njit(cache=True)
def column_sweep(A, B, P, K, Gi, Lx, Lu, LxT, e, mu, g_lin, g_quad, tau_on, Xout, Uout, gout):
    """Solve every response column's LQ problem for the current linear terms.

    Column ``j`` has state ``X_k = Phi_x[k, j]`` for ``k = j+1 .. T`` and
    input ``U_k = Phi_u[k, j]`` for ``k = j+1 .. T-1``, with the initial
    block ``X_{j+1} = diag(e_j + mu g_j)``.  When ``tau_on`` the scalar
    ``g_j`` is optimised jointly (its own cost ``g_quad/2 g^2 + g_lin[j] g``);
    otherwise ``g_j = 0``.
    """
    T = A.shape[0]
    n = A.shape[1]
    m = B.shape[2]
    kff = np.zeros((T, m, n))
    for j in range(T):
        p = LxT[j].copy()
        for k in range(T - 1, j, -1):
            gt = Lu[k, j] + B[k].T @ p
            kff[k] = -(Gi[k] @ gt)
            p = Lx[k, j] + A[k].T @ p + K[k].T @ gt
        Pj = P[j + 1]
        g = 0.0
        if tau_on:
            num = g_lin[j]
            den = g_quad
            for c in range(n):
                num += Pj[c, c] * e[j, c] * mu[c] + p[c, c] * mu[c]
                den += Pj[c, c] * mu[c] * mu[c]
            g = -num / den
        gout[j] = g
        X = np.zeros((n, n))
        for c in range(n):
            X[c, c] = e[j, c] + mu[c] * g
        Xout[j + 1, j] = X
        for k in range(j + 1, T):
            U = K[k] @ X + kff[k]
            Uout[k, j] = U
            X = A[k] @ X + B[k] @ U
            Xout[k + 1, j] = X


@njit(cache=True)
def nominal_sweep(A, B, c, P, K, Gi, lx, lu, k0):
    """Affine backward pass of the nominal LQ problem.

    Dynamics ``xi_{k+1} = A_k xi_k + B_k mu_k + c_k``; returns the feedforward
    terms (T, m) and the value-function linear terms ``p`` (T+1, n).
    """
    T = A.shape[0]
    n = A.shape[1]
    m = B.shape[2]
    kff = np.zeros((T, m))
    p = np.zeros((T + 1, n))
    p[T] = lx[T]
    for k in range(T - 1, k0 - 1, -1):
        pt = p[k + 1] + P[k + 1] @ c[k]
        gt = lu[k] + B[k].T @ pt
        kff[k] = -(Gi[k] @ gt)
        p[k] = lx[k] + A[k].T @ pt + K[k].T @ gt
    return kff, p


@njit(cache=True)
def nominal_forward(A, B, c, K, kff, xi0):
    T = A.shape[0]
    n = A.shape[1]
    m = B.shape[2]
    xi = np.zeros((T + 1, n))
    mu = np.zeros((T, m))
    xi[0] = xi0
    for k in range(T):
        mu[k] = K[k] @ xi[k] + kff[k]
        xi[k + 1] = A[k] @ xi[k] + B[k] @ mu[k] + c[k]
    return xi, mu
