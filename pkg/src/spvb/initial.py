"""Starting values from a profile likelihood of the response NNGP.

The response model y ~ N(X beta, sigma2 (R(phi) + alpha I)) is approximated
with nearest-neighbor conditioning on the nugget-augmented correlation. For
fixed (phi, alpha) the likelihood maximisers of beta and sigma2 have closed
forms, so only a two-dimensional search remains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from spvb import kernels
from spvb.config import PriorSpec
from spvb.spatial import NeighborGeometry, SpatialDataset, build_neighbor_graph

SUBSAMPLE = 1000
PHI_GRID = 12
ALPHA_GRID = np.geomspace(1e-3, 10.0, 13)
# nugget-to-sill ratio search range; a zero nugget would make 1/tau2 infinite
ALPHA_BOUNDS = (1e-4, 1e3)


@dataclass(frozen=True)
class InitialEstimates:
    sigma2: float
    tau2: float
    phi: float
    beta: np.ndarray
    loglik: float


def _profile(geom: NeighborGeometry, y, X, phi, alpha):
    g = geom.graph
    n, m = g.nbr.shape
    b = np.zeros((n, m))
    F = np.ones(n)
    ok = np.ones(n, dtype=np.bool_)
    kernels.local_factors(geom.Dnn, geom.dn, g.counts, phi, alpha, b, F, ok)
    if not np.all(ok) or np.any(F <= 0):
        return -math.inf, None, None
    Z = np.column_stack([y, X]).T.copy()
    R = np.empty_like(Z)
    kernels.cond_residual(Z, g.nbr, b, R)
    R /= np.sqrt(F)
    ys, Xs = R[0], R[1:].T
    beta, *_ = np.linalg.lstsq(Xs, ys, rcond=None)
    res = ys - Xs @ beta
    s2 = float(res @ res) / n
    if s2 <= 0:
        return -math.inf, None, None
    ll = -0.5 * n * (math.log(2 * math.pi * s2) + 1.0) - 0.5 * float(np.sum(np.log(F)))
    return ll, s2, beta


def initial_estimates(
    dataset: SpatialDataset, prior: PriorSpec, m: int = 15, seed: int = 0
) -> InitialEstimates:
    """Profile-likelihood estimates of (sigma2, tau2, phi) on a subsample."""
    n = dataset.n
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    if n > SUBSAMPLE:
        idx = np.sort(rng.choice(n, SUBSAMPLE, replace=False))
        sub = dataset.take(idx)
    else:
        sub = dataset
    if sub.n < 3:
        beta, *_ = np.linalg.lstsq(sub.X, sub.y, rcond=None)
        v = max(float(np.var(sub.y - sub.X @ beta)), 1e-6)
        return InitialEstimates(v / 2, v / 2, math.sqrt(prior.phi_min * prior.phi_max), beta, -math.inf)
    graph = build_neighbor_graph(sub.coords, min(m, sub.n - 1))
    geom = NeighborGeometry.build(sub.coords, graph)
    y, X = sub.y[graph.order], sub.X[graph.order]

    def negll(theta):
        phi, alpha = math.exp(theta[0]), math.exp(theta[1])
        if not prior.phi_min <= phi <= prior.phi_max:
            return math.inf
        if not ALPHA_BOUNDS[0] <= alpha <= ALPHA_BOUNDS[1]:
            return math.inf
        ll, _, _ = _profile(geom, y, X, phi, alpha)
        return -ll

    best = (math.inf, None)
    for phi in np.geomspace(prior.phi_min, prior.phi_max, PHI_GRID):
        for alpha in ALPHA_GRID:
            v = negll((math.log(phi), math.log(alpha)))
            if v < best[0]:
                best = (v, (math.log(phi), math.log(alpha)))
    res = optimize.minimize(
        negll, np.array(best[1]), method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 400},
    )
    theta = res.x if res.fun <= best[0] else np.array(best[1])
    phi, alpha = math.exp(theta[0]), math.exp(theta[1])
    phi = min(max(phi, prior.phi_min), prior.phi_max)
    ll, s2, beta = _profile(geom, y, X, phi, alpha)
    return InitialEstimates(s2, alpha * s2, phi, beta, ll)
