"""Posterior summaries and fit reports shared by all methods."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numba
import numpy as np

from spvb.config import FitConfig, PriorSpec
from spvb.conjugate import BetaPosterior, InverseGammaPosterior
from spvb.spatial import NeighborGraph, SpatialDataset


@numba.njit(cache=True)
def _nngp_marginal_var(gamma, nbr, a):
    """diag((I - A)^{-1} D (I - A)^{-T}) one unit column at a time."""
    n, mq = nbr.shape
    var = np.zeros(n)
    u = np.zeros(n)
    for k in range(n):
        u[k] = math.exp(gamma[k])
        var[k] += u[k] * u[k]
        for i in range(k + 1, n):
            v = 0.0
            for t in range(mq):
                j = nbr[i, t]
                if j >= k:
                    v += a[i, t] * u[j]
            u[i] = v
            var[i] += v * v
        for i in range(k, n):
            u[i] = 0.0
    return var


def nngp_marginal_variances(gamma, nbr, a) -> np.ndarray:
    return _nngp_marginal_var(
        np.ascontiguousarray(gamma, dtype=float),
        np.ascontiguousarray(nbr),
        np.ascontiguousarray(a, dtype=float),
    )


def nngp_dense_covariance(gamma, nbr, a) -> np.ndarray:
    """Dense (I - A)^{-1} D (I - A)^{-T} in processing order; small n only."""
    from scipy.linalg import solve_triangular

    n = gamma.shape[0]
    IA = np.eye(n)
    for t in range(nbr.shape[1]):
        rows = np.flatnonzero(nbr[:, t] >= 0)
        IA[rows, nbr[rows, t]] -= a[rows, t]
    L = solve_triangular(IA, np.diag(np.exp(gamma)), lower=True)
    return L @ L.T


def _apply_I_minus_A(nbr, a, Z):
    out = np.array(Z, dtype=float, copy=True)
    for t in range(nbr.shape[1]):
        rows = np.flatnonzero(nbr[:, t] >= 0)
        out[rows] -= a[rows, t, None] * Z[nbr[rows, t]]
    return out


@dataclass(frozen=True)
class GaussianSummary:
    """Posterior of w in the input order of the dataset.

    Attributes:
        mean: posterior means.
        var: marginal variances.
        kind: ``"diag"``, ``"nngp"`` or ``"dense"``.
        order: processing permutation used by an ``"nngp"`` factor.
        gamma, a, nbr: the sparse factor (processing order) for ``"nngp"``.
        lowrank: optional ``(n, k)`` factor Z (processing order) so that the
            ``"nngp"`` covariance is (I - A)^{-1} D (I - A)^{-T} + Z Z^T.
        cov: dense covariance (input order) for ``"dense"``, if computed.
    """

    mean: np.ndarray
    var: np.ndarray
    kind: str
    order: np.ndarray | None = None
    gamma: np.ndarray | None = None
    a: np.ndarray | None = None
    nbr: np.ndarray | None = None
    lowrank: np.ndarray | None = None
    cov: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def dense_cov(self) -> np.ndarray:
        if self.kind == "diag":
            return np.diag(self.var)
        if self.kind == "dense":
            if self.cov is None:
                raise ValueError("dense covariance was not computed for this fit")
            return self.cov
        S = nngp_dense_covariance(self.gamma, self.nbr, self.a)
        if self.lowrank is not None:
            S = S + self.lowrank @ self.lowrank.T
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return S[np.ix_(inv, inv)]

    def logdet(self) -> float:
        if self.kind == "diag":
            return float(np.sum(np.log(self.var)))
        if self.kind == "nngp":
            base = float(2.0 * np.sum(self.gamma))
            if self.lowrank is None:
                return base
            # determinant lemma with the sparse precision of the base factor
            Z = self.lowrank
            W = _apply_I_minus_A(self.nbr, self.a, Z) * np.exp(-self.gamma)[:, None]
            sign, ld = np.linalg.slogdet(np.eye(Z.shape[1]) + W.T @ W)
            return base + float(ld)
        sign, ld = np.linalg.slogdet(self.dense_cov())
        if sign <= 0:
            raise ValueError("covariance is not positive definite")
        return float(ld)

    def subset(self, idx) -> "GaussianSummary":
        """Restriction to input positions ``idx`` as a dense or diagonal summary."""
        idx = np.asarray(idx)
        if self.kind == "diag":
            return GaussianSummary(self.mean[idx], self.var[idx], "diag")
        C = self.dense_cov()[np.ix_(idx, idx)]
        return GaussianSummary(self.mean[idx], self.var[idx], "dense", cov=C)


@dataclass
class FitReport:
    """Everything a fit produced.

    Attributes:
        method: ``"nngp"``, ``"nngp-joint"``, ``"mfa"`` or ``"mfa-lr"``.
        dataset: the data the model was fit to (input order).
        graph: prior neighbor graph.
        beta: q(beta) mean and covariance.
        q_tau, q_sigma: inverse-gamma factors.
        phi: point estimate of the decay.
        w: posterior summary of the spatial effects.
        elbo_trace: bound per epoch (empty for the linear-response path).
        epochs: epochs run.
        converged: whether the stopping rule fired before the epoch cap.
        timings: wall-clock seconds per phase.
        state: final method-specific variational state.
        prior, config: settings used.
        kept: input indices retained (the linear-response path may drop points).
    """

    method: str
    dataset: SpatialDataset
    graph: NeighborGraph
    beta: BetaPosterior
    q_tau: InverseGammaPosterior
    q_sigma: InverseGammaPosterior
    phi: float
    w: GaussianSummary
    elbo_trace: np.ndarray
    epochs: int
    converged: bool
    timings: dict
    state: Any
    prior: PriorSpec
    config: FitConfig
    kept: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def beta_intervals(self, level: float = 0.95) -> np.ndarray:
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2)
        sd = np.sqrt(np.diag(self.beta.V_beta))
        return np.column_stack([self.beta.mu_beta - z * sd, self.beta.mu_beta + z * sd])
