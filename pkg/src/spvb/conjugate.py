"""Closed-form variational updates for beta, the two variances and phi.

Also holds the evidence lower bound assembled from posterior moments, which
every fitter uses for stopping and reporting.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln

from spvb.config import PriorSpec
from spvb.optim import AdaDeltaState, adadelta_step
from spvb.spatial import NeighborGeometry, NngpFactors, SpatialDataset

LOG_2PI = math.log(2 * math.pi)


class RankDeficientError(ValueError):
    """The design matrix does not have full column rank."""


@dataclass(frozen=True)
class BetaPosterior:
    mu_beta: np.ndarray
    V_beta: np.ndarray


@dataclass(frozen=True)
class InverseGammaPosterior:
    shape: float
    scale: float

    @property
    def mean_inv(self) -> float:
        """E[1/v]."""
        return self.shape / self.scale

    @property
    def mean_log_inv(self) -> float:
        """E[log(1/v)]."""
        return float(digamma(self.shape)) - math.log(self.scale)

    @property
    def mean(self) -> float:
        return self.scale / (self.shape - 1) if self.shape > 1 else math.inf

    def entropy(self) -> float:
        a, b = self.shape, self.scale
        return float(a + math.log(b) + gammaln(a) - (1 + a) * digamma(a))


@dataclass(frozen=True)
class PhiState:
    phi: float


@dataclass(frozen=True)
class Conjugates:
    """Current closed-form factors: q(beta), q(tau^2), q(sigma^2)."""

    beta: BetaPosterior
    q_tau: InverseGammaPosterior
    q_sigma: InverseGammaPosterior


# ---------------------------------------------------------------------------
# Least-squares helper for the design matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignQR:
    """Thin QR of X with rank check; gives (X'X)^{-1} and residual projections."""

    Q: np.ndarray
    R: np.ndarray
    XtX_inv: np.ndarray

    @classmethod
    def from_X(cls, X: np.ndarray, rtol: float = 1e-10) -> "DesignQR":
        X = np.asarray(X, dtype=float)
        _, Rp, piv = linalg.qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(Rp))
        tol = rtol * (diag[0] if diag.size else 1.0)
        if diag.size < X.shape[1] or np.any(diag <= tol):
            k = int(np.argmax(diag <= tol)) if np.any(diag <= tol) else diag.size
            raise RankDeficientError(
                f"X is rank deficient: pivot {k} (column {int(piv[k])}) has "
                f"|R_kk| = {diag[k]:.3g} <= {tol:.3g}"
            )
        Q, R = linalg.qr(X, mode="economic")
        Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
        return cls(Q, R, Rinv @ Rinv.T)

    def coef(self, v: np.ndarray) -> np.ndarray:
        return linalg.solve_triangular(self.R, self.Q.T @ v)

    def resid(self, v: np.ndarray) -> np.ndarray:
        """(I - H) v."""
        return v - self.Q @ (self.Q.T @ v)


def _qr(dataset: SpatialDataset, qr: DesignQR | None) -> DesignQR:
    return qr if qr is not None else DesignQR.from_X(dataset.X)


# ---------------------------------------------------------------------------
# Conjugate updates
# ---------------------------------------------------------------------------


def update_beta(
    dataset: SpatialDataset, E_w, E_inv_tau2: float, qr: DesignQR | None = None
) -> BetaPosterior:
    """Gaussian q(beta) given the current mean of w and E[1/tau^2]."""
    qr = _qr(dataset, qr)
    mu = qr.coef(dataset.y - np.asarray(E_w, dtype=float))
    return BetaPosterior(mu, qr.XtX_inv / E_inv_tau2)


def update_tau2(
    dataset: SpatialDataset,
    E_w,
    trace_Vw: float,
    E_inv_tau2_prev: float,
    prior: PriorSpec,
    qr: DesignQR | None = None,
    beta_w_second_moment: float | None = None,
) -> InverseGammaPosterior:
    """Inverse-gamma q(tau^2).

    ``beta_w_second_moment`` replaces ``trace_Vw + p / E_inv_tau2_prev`` when
    beta and w share one Gaussian factor: it is E||X u_beta + u_w||^2.
    """
    if trace_Vw < 0:
        raise ValueError(f"trace_Vw must be non-negative, got {trace_Vw}")
    qr = _qr(dataset, qr)
    r = qr.resid(dataset.y - np.asarray(E_w, dtype=float))
    quad = float(r @ r)
    if quad < 0:  # pragma: no cover - r @ r cannot go negative in IEEE arithmetic
        warnings.warn("negative residual quadratic form clamped to 0", stacklevel=2)
        quad = 0.0
    if beta_w_second_moment is None:
        extra = trace_Vw + dataset.p / E_inv_tau2_prev
    else:
        extra = beta_w_second_moment
    return InverseGammaPosterior(
        prior.a_tau + dataset.n / 2, prior.b_tau + 0.5 * (extra + quad)
    )


def update_sigma2(
    expected_prior_quadratic: float, prior: PriorSpec, n: int
) -> InverseGammaPosterior:
    """Inverse-gamma q(sigma^2) given sum_i E[(w_i - b_i w_N)^2] / F_i."""
    if not expected_prior_quadratic >= 0:
        raise ValueError(
            f"expected prior quadratic must be non-negative, got {expected_prior_quadratic}"
        )
    return InverseGammaPosterior(
        prior.a_sigma + n / 2, prior.b_sigma + 0.5 * expected_prior_quadratic
    )


# ---------------------------------------------------------------------------
# Point-mass phi
# ---------------------------------------------------------------------------

SecondMoment = Callable[[NngpFactors], np.ndarray]


def phi_elbo(
    phi: float,
    geometry: NeighborGeometry,
    E_inv_sigma2: float,
    second_moment: SecondMoment,
    bounds: tuple[float, float] | None = None,
) -> float:
    """Phi-dependent part of the bound.

    ``second_moment(factors)`` returns E_q[(w_i - b_i w_{N[i]})^2] for every i
    under the current q(w); factors are rebuilt at ``phi`` here.
    """
    if bounds is not None and not bounds[0] <= phi <= bounds[1]:
        return -math.inf
    f = geometry.factors(phi)
    s = second_moment(f)
    return 0.5 * float(
        np.sum(np.log(E_inv_sigma2 / f.F) - E_inv_sigma2 * s / f.F)
    )


def phi_gradient(
    phi: float,
    objective: Callable[[float], float],
    bounds: tuple[float, float],
    rel_step: float,
) -> float:
    """Central difference inside the bounds, one-sided at an edge."""
    lo, hi = bounds
    h = rel_step * (hi - lo)
    a, b = max(lo, phi - h), min(hi, phi + h)
    return (objective(b) - objective(a)) / (b - a)


def update_phi(
    state: PhiState,
    objective: Callable[[float], float],
    bounds: tuple[float, float],
    optimizer: AdaDeltaState,
    rel_step: float = 1e-3,
) -> PhiState:
    """One AdaDelta ascent step on the phi objective, clamped to the bounds."""
    g = phi_gradient(state.phi, objective, bounds, rel_step)
    if not math.isfinite(g):
        optimizer.halve()
        return state
    _, step = adadelta_step(optimizer, np.array([g]))
    phi = float(np.clip(state.phi + step[0], bounds[0], bounds[1]))
    return PhiState(phi)


# ---------------------------------------------------------------------------
# Evidence lower bound from moments
# ---------------------------------------------------------------------------


def ig_log_prior_expectation(q: InverseGammaPosterior, a: float, b: float) -> float:
    """E_q[log IG(v | a, b)]."""
    return a * math.log(b) - float(gammaln(a)) + (a + 1) * q.mean_log_inv - b * q.mean_inv


def elbo_from_moments(
    *,
    n: int,
    data_sq: float,
    prior_quad: float,
    logF_sum: float,
    entropy_w_beta: float,
    q_tau: InverseGammaPosterior,
    q_sigma: InverseGammaPosterior,
    prior: PriorSpec,
) -> float:
    """Full bound given E||y - X beta - w||^2 and sum_i E[(w_i - b w_N)^2]/F_i.

    ``entropy_w_beta`` is the differential entropy of q(w, beta).
    """
    lik = -0.5 * n * LOG_2PI + 0.5 * n * q_tau.mean_log_inv - 0.5 * q_tau.mean_inv * data_sq
    wprior = (
        -0.5 * n * LOG_2PI
        + 0.5 * n * q_sigma.mean_log_inv
        - 0.5 * logF_sum
        - 0.5 * q_sigma.mean_inv * prior_quad
    )
    hyper = (
        ig_log_prior_expectation(q_tau, prior.a_tau, prior.b_tau)
        + ig_log_prior_expectation(q_sigma, prior.a_sigma, prior.b_sigma)
        - math.log(prior.phi_max - prior.phi_min)
    )
    ent = entropy_w_beta + q_tau.entropy() + q_sigma.entropy()
    return lik + wprior + hyper + ent


def gaussian_entropy_from_logdet(dim: int, logdet: float) -> float:
    return 0.5 * dim * (1.0 + LOG_2PI) + 0.5 * logdet
