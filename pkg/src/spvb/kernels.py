"""Compiled inner loops for the NNGP recursions.

Every kernel works on padded neighbor arrays: ``nbr[i, k] == -1`` marks an
unused slot and the matching coefficient is zero. Loops run in a fixed order
so results do not depend on the number of threads: parallel loops only
split independent rows (samples or locations) and never reduce across them.
"""

import math

import numba
import numpy as np

# prefer OpenMP; the bundled TBB is often too old and only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@numba.njit(cache=True, parallel=True)
def local_factors(Dnn, dn, counts, phi, jitter, b, F, ok):
    """Conditional regression weights and variance ratios, row by row.

    Solves the |N[i]| x |N[i]| correlation system with an in-place Cholesky
    factorization. ``jitter`` is added to the diagonal of the full local
    correlation matrix (neighbors and the row itself).
    """
    n, m = dn.shape
    for i in numba.prange(n):
        L = np.empty((m, m))
        z = np.empty(m)
        k = counts[i]
        for j in range(m):
            b[i, j] = 0.0
        if k == 0:
            F[i] = 1.0 + jitter
            ok[i] = True
            continue
        for r in range(k):
            for c in range(r + 1):
                L[r, c] = math.exp(-phi * Dnn[i, r, c])
            L[r, r] += jitter
        good = True
        for c in range(k):
            s = L[c, c]
            for t in range(c):
                s -= L[c, t] * L[c, t]
            if s <= 0.0:
                good = False
                break
            d = math.sqrt(s)
            L[c, c] = d
            for r in range(c + 1, k):
                s2 = L[r, c]
                for t in range(c):
                    s2 -= L[r, t] * L[c, t]
                L[r, c] = s2 / d
        if not good:
            ok[i] = False
            F[i] = 1.0
            continue
        # forward solve L z = c
        zz = 0.0
        for r in range(k):
            s = math.exp(-phi * dn[i, r])
            for t in range(r):
                s -= L[r, t] * z[t]
            z[r] = s / L[r, r]
            zz += z[r] * z[r]
        # back solve L^T b = z
        for r in range(k - 1, -1, -1):
            s = z[r]
            for t in range(r + 1, k):
                s -= L[t, r] * b[i, t]
            b[i, r] = s / L[r, r]
        F[i] = 1.0 + jitter - zz
        ok[i] = F[i] > 0.0


@numba.njit(cache=True, parallel=True)
def forward_solve(xi, gamma, nbr, a, u):
    """u_i = exp(gamma_i) xi_i + sum_k a[i, k] u[nbr[i, k]] for every sample row."""
    S, n = xi.shape
    mq = nbr.shape[1]
    for s in numba.prange(S):
        for i in range(n):
            v = math.exp(gamma[i]) * xi[s, i]
            for k in range(mq):
                j = nbr[i, k]
                if j >= 0:
                    v += a[i, k] * u[s, j]
            u[s, i] = v


@numba.njit(cache=True, parallel=True)
def forward_solve_shift(xi, gamma, shift, nbr, a, u):
    """As ``forward_solve`` with an extra additive term ``shift[s, i]``."""
    S, n = xi.shape
    mq = nbr.shape[1]
    for s in numba.prange(S):
        for i in range(n):
            v = math.exp(gamma[i]) * xi[s, i] + shift[s, i]
            for k in range(mq):
                j = nbr[i, k]
                if j >= 0:
                    v += a[i, k] * u[s, j]
            u[s, i] = v


@numba.njit(cache=True, parallel=True)
def cond_residual(w, nbr, b, out):
    """out[s, i] = w[s, i] - sum_k b[i, k] w[s, nbr[i, k]]."""
    S, n = w.shape
    m = nbr.shape[1]
    for s in numba.prange(S):
        for i in range(n):
            v = w[s, i]
            for k in range(m):
                j = nbr[i, k]
                if j >= 0:
                    v -= b[i, k] * w[s, j]
            out[s, i] = v


@numba.njit(cache=True, parallel=True)
def scatter_to_neighbors(vals, nbr, b, out):
    """out[s, j] = sum over (l, k) with nbr[l, k] == j of b[l, k] vals[s, l]."""
    S, n = vals.shape
    m = nbr.shape[1]
    for s in numba.prange(S):
        for j in range(n):
            out[s, j] = 0.0
        for l in range(n):
            v = vals[s, l]
            for k in range(m):
                j = nbr[l, k]
                if j >= 0:
                    out[s, j] += b[l, k] * v


@numba.njit(cache=True, parallel=True)
def neighbor_products(u, g, nbr, out):
    """out[i, k] = mean_s u[s, nbr[i, k]] * g[s, i] (zero on padded slots)."""
    S, n = u.shape
    mq = nbr.shape[1]
    for i in numba.prange(n):
        for k in range(mq):
            j = nbr[i, k]
            acc = 0.0
            if j >= 0:
                for s in numba.prange(S):
                    acc += u[s, j] * g[s, i]
                acc /= S
            out[i, k] = acc
