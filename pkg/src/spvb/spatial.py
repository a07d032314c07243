"""Spatial data containers, neighbor graphs and NNGP prior factors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from spvb import kernels

BRUTE_FORCE_MAX_N = 2000
JITTER_REL = 1e-10


class SpatialError(ValueError):
    """Invalid spatial input."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialDataset:
    """Observed locations, covariates and responses.

    Attributes:
        coords: ``(n, 2)`` coordinates.
        X: ``(n, p)`` covariate matrix.
        y: ``(n,)`` responses.
    """

    coords: np.ndarray
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X = np.ascontiguousarray(X)
        y = np.ascontiguousarray(self.y, dtype=float).reshape(-1)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise SpatialError(f"coords must be (n, 2), got {coords.shape}")
        n = coords.shape[0]
        if n < 1:
            raise SpatialError("dataset needs at least one location")
        if X.shape[0] != n or y.shape[0] != n:
            raise SpatialError(
                f"row mismatch: coords {n}, X {X.shape[0]}, y {y.shape[0]}"
            )
        if X.shape[1] < 1:
            raise SpatialError("X needs at least one column")
        for name, arr in (("coords", coords), ("X", X), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise SpatialError(f"{name} contains non-finite entries")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def take(self, idx) -> "SpatialDataset":
        idx = np.asarray(idx)
        return SpatialDataset(self.coords[idx], self.X[idx], self.y[idx])


@dataclass(frozen=True)
class NeighborGraph:
    """Ordered nearest-neighbor sets.

    Positions ``i`` below refer to the processing order: location
    ``order[i]`` of the input is the i-th processed location. ``nbr[i]``
    lists the ordered positions of its neighbors nearest first, padded
    with ``-1``.

    Attributes:
        order: permutation of ``0..n-1``.
        nbr: ``(n, m)`` int array of neighbor positions, ``-1`` padded.
        counts: ``(n,)`` number of valid neighbors per row.
    """

    order: np.ndarray
    nbr: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.nbr.shape[0]

    @property
    def m(self) -> int:
        return self.nbr.shape[1]

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbr[i, : self.counts[i]]

    def neighbor_lists(self) -> list[list[int]]:
        return [self.neighbors(i).tolist() for i in range(self.n)]

    def truncate(self, m_q: int) -> "NeighborGraph":
        """Nested graph keeping the ``m_q`` nearest entries of each row."""
        m_q = min(m_q, self.m)
        return NeighborGraph(
            self.order,
            np.ascontiguousarray(self.nbr[:, :m_q]),
            np.minimum(self.counts, m_q),
        )


@dataclass(frozen=True)
class NngpFactors:
    """NNGP regression weights and conditional-variance ratios at ``phi``.

    ``b`` is padded like the graph's ``nbr`` (zeros in unused slots).
    """

    b: np.ndarray
    F: np.ndarray
    phi: float
    nbr: np.ndarray = field(repr=False)

    def b_row(self, i: int) -> np.ndarray:
        return self.b[i, : int(np.sum(self.nbr[i] >= 0))]


# ---------------------------------------------------------------------------
# Covariance and neighbor search
# ---------------------------------------------------------------------------


def exp_correlation(d, phi):
    """Unit-sill exponential correlation ``exp(-phi * d)``."""
    d = np.asarray(d, dtype=float)
    if not math.isfinite(phi) or phi <= 0:
        raise SpatialError(f"phi must be finite and positive, got {phi}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise SpatialError("distances must be finite and non-negative")
    out = np.exp(-phi * d)
    return float(out) if out.ndim == 0 else out


def pairwise_distances(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    b = a if b is None else b
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def max_distance(coords: np.ndarray) -> float:
    """Largest pairwise distance (exact scan or convex-hull diameter)."""
    coords = np.asarray(coords, dtype=float)
    pts = coords
    if coords.shape[0] > BRUTE_FORCE_MAX_N:
        try:
            pts = coords[ConvexHull(coords).vertices]
        except QhullError:
            # degenerate (collinear) cloud: extremes along the main axis suffice
            axis = np.argmax(np.ptp(coords, axis=0))
            pts = coords[[np.argmin(coords[:, axis]), np.argmax(coords[:, axis])]]
    best = 0.0
    for start in range(0, pts.shape[0], 512):
        best = max(best, float(pairwise_distances(pts[start : start + 512], pts).max()))
    return best


def location_order(coords: np.ndarray, ordering="coord") -> np.ndarray:
    """Processing permutation for an ordering policy.

    ``"coord"`` sorts by first coordinate, then second, then input index;
    ``"given"`` keeps the input order; an integer array is used as is.
    """
    n = coords.shape[0]
    if isinstance(ordering, str):
        if ordering == "coord":
            return np.lexsort((np.arange(n), coords[:, 1], coords[:, 0]))
        if ordering == "given":
            return np.arange(n)
        raise SpatialError(f"unknown ordering policy {ordering!r}")
    perm = np.asarray(ordering, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise SpatialError("ordering must be a permutation of 0..n-1")
    return perm


def _rank_candidates(sc, rows, cand, m):
    """Pick the ``m`` nearest valid candidates per row, ties by smaller index."""
    valid = (cand < rows[:, None]) & (cand >= 0)
    safe = np.where(valid, cand, 0)
    diff = sc[safe] - sc[rows][:, None, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    dist = np.where(valid, dist, np.inf)
    key_idx = np.where(valid, cand, np.iinfo(np.int64).max)
    pick = np.lexsort((key_idx, dist), axis=-1)[:, :m]
    return np.take_along_axis(safe, pick, 1), np.take_along_axis(dist, pick, 1), valid


def _neighbors_brute(sc: np.ndarray, m: int) -> np.ndarray:
    n = sc.shape[0]
    nbr = np.full((n, m), -1, dtype=np.int64)
    for start in range(1, n, 256):
        rows = np.arange(start, min(n, start + 256))
        width = max(int(rows[-1]), m)
        cand = np.broadcast_to(np.arange(width), (rows.size, width))
        idx, _, _ = _rank_candidates(sc, rows, cand, m)
        k = np.minimum(rows, m)
        mask = np.arange(m)[None, :] < k[:, None]
        nbr[rows] = np.where(mask, idx, -1)
    return nbr


def _neighbors_tree(sc: np.ndarray, m: int) -> np.ndarray:
    n = sc.shape[0]
    nbr = np.full((n, m), -1, dtype=np.int64)
    small = np.arange(1, min(n, 4 * m))
    if small.size:
        nbr[small] = _neighbors_brute(sc[: small[-1] + 1], m)[small]
    tree = cKDTree(sc)
    pending = np.arange(min(n, 4 * m), n)
    k = 4 * m
    while pending.size:
        k = min(2 * k, n)
        dq, cand = tree.query(sc[pending], k=k)
        cand = np.where(np.isfinite(dq), cand, -1).astype(np.int64)
        idx, dist, valid = _rank_candidates(sc, pending, cand, m)
        # exact only if the m-th kept neighbor is strictly inside the query ball
        nvalid = valid.sum(axis=1)
        enough = (nvalid >= m) & (dist[:, m - 1] < dq[:, -1])
        done = enough | (k >= n)
        nbr[pending[done]] = idx[done]
        pending = pending[~done]
    return nbr


def build_neighbor_graph(coords, m: int, ordering="coord") -> NeighborGraph:
    """Nearest earlier neighbors for every location in processing order."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if m < 1:
        raise SpatialError("neighbor count m must be at least 1")
    if n < 1:
        raise SpatialError("need at least one location")
    if m >= n:
        if n > 1:
            warnings.warn(f"m={m} >= n={n}; clamping to {n - 1}", stacklevel=2)
        m = max(n - 1, 1)
    order = location_order(coords, ordering)
    sc = coords[order]
    if n <= BRUTE_FORCE_MAX_N:
        nbr = _neighbors_brute(sc, m)
    else:
        nbr = _neighbors_tree(sc, m)
    counts = (nbr >= 0).sum(axis=1).astype(np.int64)
    return NeighborGraph(order, nbr, counts)


# ---------------------------------------------------------------------------
# NNGP factors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborGeometry:
    """Distances needed to rebuild factors at any ``phi`` without searching.

    Attributes:
        Dnn: ``(n, m, m)`` distances among each row's neighbors.
        dn: ``(n, m)`` distances from each location to its neighbors.
        graph: the neighbor graph the distances refer to.
        jitter: absolute diagonal jitter used when a local solve fails.
    """

    Dnn: np.ndarray
    dn: np.ndarray
    graph: NeighborGraph
    jitter: float

    @classmethod
    def build(cls, coords, graph: NeighborGraph) -> "NeighborGeometry":
        sc = np.asarray(coords, dtype=float)[graph.order]
        safe = np.where(graph.nbr >= 0, graph.nbr, 0)
        pts = sc[safe]
        diff = pts - sc[:, None, :]
        dn = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dd = pts[:, :, None, :] - pts[:, None, :, :]
        Dnn = np.sqrt(np.einsum("ijkl,ijkl->ijk", dd, dd))
        dmax = max_distance(sc) if sc.shape[0] > 1 else 1.0
        return cls(Dnn, dn, graph, JITTER_REL * (dmax if dmax > 0 else 1.0))

    def factors(self, phi: float) -> NngpFactors:
        if not math.isfinite(phi) or phi <= 0:
            raise SpatialError(f"phi must be finite and positive, got {phi}")
        g = self.graph
        n, m = g.nbr.shape
        b = np.zeros((n, m))
        F = np.ones(n)
        ok = np.ones(n, dtype=np.bool_)
        kernels.local_factors(self.Dnn, self.dn, g.counts, float(phi), 0.0, b, F, ok)
        bad = ~ok | (F <= 1e-12)
        if np.any(bad):
            rows = np.flatnonzero(bad)
            b2 = np.zeros((rows.size, m))
            F2 = np.ones(rows.size)
            ok2 = np.ones(rows.size, dtype=np.bool_)
            kernels.local_factors(
                self.Dnn[rows], self.dn[rows], g.counts[rows], float(phi),
                self.jitter, b2, F2, ok2,
            )
            if not np.all(ok2):
                raise SpatialError(
                    f"local correlation matrix singular at rows {rows[~ok2][:5].tolist()}"
                    " even after jitter; remove duplicate locations"
                )
            b[rows] = b2
            F[rows] = F2
        return NngpFactors(b, F, float(phi), g.nbr)


def nngp_factors(coords, graph: NeighborGraph, phi: float) -> NngpFactors:
    """Factors b, F for the ordered locations (positions follow ``graph``)."""
    return NeighborGeometry.build(coords, graph).factors(phi)


def cond_residuals(w: np.ndarray, factors: NngpFactors) -> np.ndarray:
    """``w_i - b_i . w_{N[i]}`` for a vector or a stack of rows."""
    w = np.asarray(w, dtype=float)
    W = np.atleast_2d(w)
    if W.shape[1] != factors.F.shape[0]:
        raise SpatialError(f"length mismatch: {W.shape[1]} vs {factors.F.shape[0]}")
    out = np.empty_like(W)
    kernels.cond_residual(np.ascontiguousarray(W), factors.nbr, factors.b, out)
    return out[0] if w.ndim == 1 else out


def reverse_scatter(vals: np.ndarray, nbr: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Adjoint of the neighbor gather: ``out_j = sum_{l: j in N[l]} coef[l, .] vals_l``."""
    vals = np.asarray(vals, dtype=float)
    V = np.atleast_2d(vals)
    out = np.empty_like(V)
    kernels.scatter_to_neighbors(np.ascontiguousarray(V), nbr, coef, out)
    return out[0] if vals.ndim == 1 else out


def prior_quadratic(w, factors: NngpFactors) -> float:
    """``sum_i (w_i - b_i . w_{N[i]})^2 / F_i`` (unit sill)."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise SpatialError("w must be a vector")
    r = cond_residuals(w, factors)
    return float(np.sum(r * r / factors.F))


def nngp_logdensity(w, factors: NngpFactors, sigma2: float) -> float:
    """Log density of ``w`` (ordered positions) under the NNGP prior."""
    n = factors.F.shape[0]
    q = prior_quadratic(w, factors)
    logdet = float(np.sum(np.log(sigma2 * factors.F)))
    return -0.5 * (n * math.log(2 * math.pi) + logdet + q / sigma2)


def sparse_B(factors: NngpFactors):
    """Strictly lower-triangular ``B`` as a CSR matrix."""
    from scipy import sparse

    n, m = factors.b.shape
    rows = np.repeat(np.arange(n), m)
    cols = factors.nbr.reshape(-1)
    vals = factors.b.reshape(-1)
    keep = cols >= 0
    return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def nngp_covariance(factors: NngpFactors, sigma2: float = 1.0) -> np.ndarray:
    """Dense ``(I - B)^{-1} sigma2 F (I - B)^{-T}``; small n only."""
    from scipy.linalg import solve_triangular

    n = factors.F.shape[0]
    IB = np.eye(n) - sparse_B(factors).toarray()
    Linv = solve_triangular(IB, np.eye(n), lower=True)
    return (Linv * (sigma2 * factors.F)) @ Linv.T


def nngp_precision(factors: NngpFactors, sigma2: float = 1.0):
    """Sparse ``(I - B)^T F^{-1} (I - B) / sigma2``."""
    from scipy import sparse

    n = factors.F.shape[0]
    IB = sparse.identity(n, format="csr") - sparse_B(factors)
    return (IB.T @ sparse.diags(1.0 / (sigma2 * factors.F)) @ IB).tocsc()
