"""Simulation, the exact conditional posterior of w, and scoring rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from spvb.report import GaussianSummary
from spvb.spatial import (
    NeighborGraph,
    SpatialDataset,
    build_neighbor_graph,
    nngp_factors,
    nngp_precision,
)

DENSE_MAX_N = 5000


@dataclass(frozen=True)
class SimSpec:
    """Simulation design; defaults follow the standard benchmark setting."""

    n: int = 1000
    domain_side: float = 10.0
    beta_true: tuple = (2.0, 5.0)
    tau2_true: float = 0.5
    sigma2_true: float = 10.0
    phi_true: float = 1.0
    m_gen: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.tau2_true < 0 or self.sigma2_true < 0 or self.phi_true <= 0:
            raise ValueError("variances must be non-negative and phi positive")
        if self.domain_side <= 0:
            raise ValueError("domain side must be positive")


@dataclass(frozen=True)
class Truth:
    beta: np.ndarray
    tau2: float
    sigma2: float
    phi: float


@dataclass(frozen=True)
class ReferencePosterior:
    """Exact Gaussian conditional of w at fixed parameters, input order."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(repr=False, default=None)

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def simulate(spec: SimSpec, ordering="coord") -> tuple[SpatialDataset, np.ndarray]:
    """Uniform locations on a square, Gaussian covariates and NNGP effects."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5137]))
    n, p = spec.n, len(spec.beta_true)
    coords = rng.uniform(0.0, spec.domain_side, size=(n, 2))
    X = rng.standard_normal((n, p))
    z = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    w = np.zeros(n)
    if spec.sigma2_true > 0:
        graph = build_neighbor_graph(coords, min(spec.m_gen, max(n - 1, 1)), ordering)
        f = nngp_factors(coords, graph, spec.phi_true)
        wo = np.zeros(n)
        sd = np.sqrt(spec.sigma2_true * f.F)
        zo = z[graph.order]
        for i in range(n):
            k = graph.counts[i]
            wo[i] = f.b[i, :k] @ wo[graph.nbr[i, :k]] + sd[i] * zo[i]
        w[graph.order] = wo
    y = X @ np.asarray(spec.beta_true, dtype=float) + w + np.sqrt(spec.tau2_true) * eps
    return SpatialDataset(coords, X, y), w


def truth_of(spec: SimSpec) -> Truth:
    return Truth(np.asarray(spec.beta_true, float), spec.tau2_true, spec.sigma2_true, spec.phi_true)


def reference_posterior(
    dataset: SpatialDataset, w_graph: NeighborGraph, truth: Truth
) -> ReferencePosterior:
    """N(Sigma (y - X beta) / tau2, Sigma) with Sigma = [I / tau2 + Ct^{-1}]^{-1}."""
    n = dataset.n
    if n > DENSE_MAX_N:
        raise ValueError(
            f"dense reference posterior limited to n <= {DENSE_MAX_N}; evaluate on a subsample"
        )
    f = nngp_factors(dataset.coords, w_graph, truth.phi)
    order = w_graph.order
    P = nngp_precision(f, truth.sigma2).toarray()
    inv_tau = 0.0 if np.isinf(truth.tau2) else 1.0 / truth.tau2
    P[np.diag_indices(n)] += inv_tau
    Lp = linalg.cholesky(P, lower=True)
    cov_o = linalg.cho_solve((Lp, True), np.eye(n))
    cov_o = 0.5 * (cov_o + cov_o.T)
    resid = (dataset.y - dataset.X @ truth.beta)[order]
    mean_o = linalg.cho_solve((Lp, True), inv_tau * resid)
    inv = np.empty_like(order)
    inv[order] = np.arange(n)
    cov = cov_o[np.ix_(inv, inv)]
    return ReferencePosterior(mean_o[inv], cov, linalg.cholesky(cov, lower=True))


def _ref_chol(ref: ReferencePosterior) -> np.ndarray:
    return ref.chol if ref.chol is not None else linalg.cholesky(ref.cov, lower=True)


def kl_gaussian(q_mean, q_cov, ref: ReferencePosterior) -> float:
    """KL(q || ref) for Gaussian q.

    ``q_cov`` is a vector of variances (mean field), a dense matrix, or a
    ``GaussianSummary`` (sparse NNGP factor or dense).
    """
    q_mean = np.asarray(q_mean, dtype=float)
    n = q_mean.shape[0]
    Lr = _ref_chol(ref)
    if isinstance(q_cov, GaussianSummary):
        if q_cov.kind == "diag":
            return kl_gaussian(q_mean, q_cov.var, ref)
        logdet_q = q_cov.logdet()
        Sq = q_cov.dense_cov()
    else:
        q_cov = np.asarray(q_cov, dtype=float)
        if q_cov.ndim == 1:
            if np.any(q_cov <= 0):
                raise ValueError("variances must be positive")
            Pinv_diag = linalg.cho_solve((Lr, True), np.eye(n)).diagonal()
            Sq = None
            logdet_q = float(np.sum(np.log(q_cov)))
            tr = float(np.sum(Pinv_diag * q_cov))
        else:
            try:
                Lq = linalg.cholesky(q_cov, lower=True)
            except linalg.LinAlgError as exc:
                raise ValueError("q covariance is not positive definite") from exc
            Sq = q_cov
            logdet_q = 2.0 * float(np.sum(np.log(np.diag(Lq))))
    if Sq is not None:
        tr = float(np.trace(linalg.cho_solve((Lr, True), Sq)))
    diff = ref.mean - q_mean
    z = linalg.solve_triangular(Lr, diff, lower=True)
    logdet_r = 2.0 * float(np.sum(np.log(np.diag(Lr))))
    return 0.5 * (tr + float(z @ z) - n + logdet_r - logdet_q)


# ---------------------------------------------------------------------------
# Scoring rules
# ---------------------------------------------------------------------------


def crps_samples(draws, truth):
    """Energy-form CRPS: mean|X - x| - 0.5 mean|X - X'| over all draw pairs.

    ``draws`` may be ``(S,)`` with scalar truth or ``(S, r)`` with ``r`` truths.
    """
    d = np.asarray(draws, dtype=float)
    single = d.ndim == 1
    D = d[:, None] if single else d
    x = np.atleast_1d(np.asarray(truth, dtype=float))
    S = D.shape[0]
    if S < 2:
        raise ValueError("need at least two draws")
    t1 = np.mean(np.abs(D - x[None, :]), axis=0)
    gaps = np.diff(np.sort(D, axis=0), axis=0)
    k = np.arange(1, S)[:, None]
    # sum_{i,j} |x_i - x_j| = 2 sum_k k (S - k) (x_(k+1) - x_(k)); exact for ties
    t2 = 2.0 * np.sum(k * (S - k) * gaps, axis=0) / (S * S)
    out = t1 - 0.5 * t2
    return float(out[0]) if single else out


def interval_score_95(lower, upper, truth):
    lower, upper, truth = (np.asarray(v, dtype=float) for v in (lower, upper, truth))
    if np.any(lower > upper):
        raise ValueError("interval bounds are crossed")
    alpha = 0.05
    out = (
        (upper - lower)
        + (2 / alpha) * (lower - truth) * (truth < lower)
        + (2 / alpha) * (truth - upper) * (truth > upper)
    )
    return float(out) if out.ndim == 0 else out


def coverage_95(lower, upper, truths) -> float:
    lower, upper, truths = (np.asarray(v, dtype=float) for v in (lower, upper, truths))
    if not lower.shape == upper.shape == truths.shape:
        raise ValueError("intervals and truths must have equal lengths")
    return float(np.mean((truths >= lower) & (truths <= upper)))


def gaussian_intervals(mean, var, level: float = 0.95):
    from scipy.stats import norm

    z = norm.ppf(0.5 + level / 2)
    sd = np.sqrt(var)
    return mean - z * sd, mean + z * sd


def w_metrics(summary: GaussianSummary, w_true: np.ndarray, n_draws: int = 500, seed: int = 0) -> dict:
    """Coverage, interval score, CRPS and MSE of a Gaussian w-summary."""
    lo, hi = gaussian_intervals(summary.mean, summary.var)
    rng = np.random.default_rng(seed)
    draws = summary.mean + np.sqrt(summary.var) * rng.standard_normal((n_draws, summary.n))
    return {
        "coverage": coverage_95(lo, hi, w_true),
        "interval_score": float(np.mean(interval_score_95(lo, hi, w_true))),
        "crps": float(np.mean(crps_samples(draws, w_true))),
        "mse": float(np.mean((summary.mean - w_true) ** 2)),
    }
