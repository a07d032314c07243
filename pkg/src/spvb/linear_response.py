"""Linear-response covariance correction for (beta, w) after a mean-field fit.

With the variances (tau2, sigma2) and the decay phi held at plug-in values,
the expected log posterior is quadratic in the first moments, so its Hessian
H in the means is constant. The corrected covariance of alpha = (beta, w) is
(I - V H)^{-1} V, where V holds the mean-field variances. Every quantity here
lives in processing order; ``fit_spvb_mfa_lr`` maps back to input order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg
from scipy.spatial import cKDTree

from spvb.config import FitConfig, PriorSpec
from spvb.conjugate import BetaPosterior, update_sigma2, update_tau2
from spvb.mfa import MfaVariational, mfa_prior_quadratic, precision_weights
from spvb.problem import Problem, prepare
from spvb.report import FitReport, GaussianSummary
from spvb.spatial import NngpFactors, SpatialDataset, sparse_B

MAX_CONDITION = 1e12
_CHUNK = 256


class LinearResponseError(np.linalg.LinAlgError):
    """The linear-response system is singular or too ill-conditioned."""


@dataclass(frozen=True)
class LrInputs:
    """Mean-field optimum at fixed (tau2, sigma2, phi)."""

    mu_beta: np.ndarray
    sigma2_beta: np.ndarray
    mu_w: np.ndarray
    G: np.ndarray
    tau2: float
    sigma2: float
    phi: float
    factors: NngpFactors

    def __post_init__(self):
        if np.any(self.sigma2_beta <= 0) or np.any(self.G <= 0):
            raise ValueError("mean-field variances must be positive")

    @property
    def p(self) -> int:
        return self.mu_beta.shape[0]

    @property
    def n(self) -> int:
        return self.mu_w.shape[0]

    @property
    def V_diag(self) -> np.ndarray:
        return np.concatenate([self.sigma2_beta, self.G])


@dataclass(frozen=True)
class LrCorrected:
    """Corrected covariance pieces for alpha = (beta, w).

    ``var`` is always the full diagonal and ``beta_cov`` the p x p block.
    ``columns`` holds the requested columns (or ``None``) and ``full`` the
    whole matrix when it was asked for.
    """

    var: np.ndarray
    beta_cov: np.ndarray
    columns: np.ndarray | None = None
    column_index: np.ndarray | None = None
    full: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Mean-field optimum
# ---------------------------------------------------------------------------


def _precision_ww(factors: NngpFactors, sigma2: float):
    n = factors.F.shape[0]
    IB = sparse.identity(n, format="csr") - sparse_B(factors)
    return IB.T @ sparse.diags(1.0 / (sigma2 * factors.F)) @ IB


def _joint_precision(X: np.ndarray, factors: NngpFactors, tau2: float, sigma2: float):
    """Precision of (beta, w) under a flat beta prior at fixed variances."""
    n = X.shape[0]
    top = sparse.hstack([sparse.csr_matrix(X.T @ X / tau2), sparse.csr_matrix(X.T / tau2)])
    bot = sparse.hstack([
        sparse.csr_matrix(X / tau2),
        sparse.identity(n, format="csr") / tau2 + _precision_ww(factors, sigma2),
    ])
    return sparse.vstack([top, bot]).tocsc()


def fit_mfa_for_lr(
    dataset: SpatialDataset, factors: NngpFactors, tau2: float, sigma2: float
) -> LrInputs:
    """Mean-field optimum with the variances fixed; ``dataset`` in processing order.

    The coordinate updates for the means are Jacobi/Gauss-Seidel sweeps on the
    joint normal equations, so their fixed point is obtained directly by one
    sparse solve. The variances have closed forms.
    """
    if not (tau2 > 0 and sigma2 > 0):
        raise ValueError("tau2 and sigma2 must be positive")
    X, y = dataset.X, dataset.y
    Q = _joint_precision(X, factors, tau2, sigma2)
    rhs = np.concatenate([X.T @ y, y]) / tau2
    sol = splinalg.spsolve(Q, rhs, permc_spec="COLAMD")
    p = X.shape[1]
    col_sq = np.einsum("ij,ij->j", X, X)
    c = precision_weights(factors)
    return LrInputs(
        mu_beta=sol[:p],
        sigma2_beta=tau2 / col_sq,
        mu_w=sol[p:],
        G=1.0 / (1.0 / tau2 + c / sigma2),
        tau2=float(tau2),
        sigma2=float(sigma2),
        phi=float(factors.phi),
        factors=factors,
    )


# ---------------------------------------------------------------------------
# Hessian and correction
# ---------------------------------------------------------------------------


def build_hessian_alpha(inputs: LrInputs, dataset: SpatialDataset):
    """Hessian of the expected log posterior in the means of (beta, w); CSC.

    All diagonal entries are zero: the squared terms depend on the second
    moments, not on products of first moments.
    """
    X = dataset.X
    n, p = X.shape
    f = inputs.factors
    B = sparse_B(f)
    Finv = sparse.diags(1.0 / f.F)
    ww = (B.T @ Finv + Finv @ B - B.T @ Finv @ B) / inputs.sigma2
    ww = (0.5 * (ww + ww.T)).tolil()
    ww.setdiag(0.0)
    bb = -(X.T @ X) / inputs.tau2
    np.fill_diagonal(bb, 0.0)
    bw = sparse.csr_matrix(-X.T / inputs.tau2)
    H = sparse.bmat([[sparse.csr_matrix(bb), bw], [bw.T, ww.tocsr()]], format="csc")
    H.eliminate_zeros()
    return H


def _condition_1norm(A, lu) -> float:
    n = A.shape[0]
    inv = splinalg.LinearOperator(
        (n, n), matvec=lu.solve, rmatvec=lambda v: lu.solve(v, trans="T"), dtype=float
    )
    return float(splinalg.norm(A, 1) * splinalg.onenormest(inv))


def lr_correct(inputs: LrInputs, hessian, columns=None, full: bool = False) -> LrCorrected:
    """Solve (I - V H) c_j = v_j for the columns needed.

    By default every column is solved in chunks but only the diagonal and the
    beta block are kept, so memory stays linear in n. ``columns`` keeps the
    listed columns and ``full`` the whole matrix.
    """
    v = inputs.V_diag
    d = v.shape[0]
    A = (sparse.identity(d, format="csc") - sparse.diags(v) @ hessian).tocsc()
    try:
        lu = splinalg.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise LinearResponseError(
            "linear-response system is singular; remove near-duplicate "
            "locations with filter_close_points"
        ) from exc
    cond = _condition_1norm(A, lu)
    if not math.isfinite(cond) or cond > MAX_CONDITION:
        raise LinearResponseError(
            f"linear-response system condition estimate {cond:.3g} exceeds "
            f"{MAX_CONDITION:.0e}; remove near-duplicate locations with filter_close_points"
        )
    p = inputs.p
    var = np.empty(d)
    beta_cov = np.empty((p, p))
    keep = None if columns is None else np.unique(np.asarray(columns, dtype=np.int64))
    kept_cols = None if keep is None else np.empty((d, keep.size))
    dense = np.empty((d, d)) if full else None
    for start in range(0, d, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, d))
        rhs = np.zeros((d, idx.size))
        rhs[idx, np.arange(idx.size)] = v[idx]
        C = lu.solve(rhs)
        var[idx] = C[idx, np.arange(idx.size)]
        in_beta = idx < p
        if np.any(in_beta):
            beta_cov[:, idx[in_beta]] = C[:p, in_beta]
        if keep is not None:
            hit = np.isin(keep, idx)
            kept_cols[:, hit] = C[:, keep[hit] - start]
        if dense is not None:
            dense[:, idx] = C
    beta_cov = 0.5 * (beta_cov + beta_cov.T)
    if dense is not None:
        dense = 0.5 * (dense + dense.T)
    if np.any(var <= 0):
        raise LinearResponseError("corrected variances are not all positive")
    return LrCorrected(var, beta_cov, kept_cols, keep, dense)


# ---------------------------------------------------------------------------
# Near-duplicate filter
# ---------------------------------------------------------------------------


def filter_close_points(
    dataset: SpatialDataset, phi: float, min_corr: float = 0.99
) -> tuple[SpatialDataset, np.ndarray]:
    """Drop later points whose correlation with a kept earlier point is >= ``min_corr``.

    Returns the filtered dataset and the dropped input indices.
    """
    if not 0 < min_corr < 1:
        raise ValueError("min_corr must lie in (0, 1)")
    if not phi > 0:
        raise ValueError("phi must be positive")
    radius = -math.log(min_corr) / phi
    pairs = cKDTree(dataset.coords).query_pairs(radius, output_type="ndarray")
    dropped = np.zeros(dataset.n, dtype=bool)
    if pairs.size:
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        for i, j in pairs:
            if not dropped[i]:
                dropped[j] = True
    drop_idx = np.flatnonzero(dropped)
    if drop_idx.size == 0:
        return dataset, drop_idx
    return dataset.take(np.flatnonzero(~dropped)), drop_idx


# ---------------------------------------------------------------------------
# End-to-end fit
# ---------------------------------------------------------------------------


def fit_spvb_mfa_lr(
    dataset: SpatialDataset,
    prior: PriorSpec | None = None,
    config: FitConfig | None = None,
    problem: Problem | None = None,
    fixed: dict | None = None,
    min_corr: float = 0.99,
    full: bool = False,
) -> FitReport:
    """Mean-field fit at plug-in variances followed by the linear-response step.

    The plug-in (tau2, sigma2, phi) come from the profile-likelihood
    initializer unless given in ``fixed``. Points too close to an earlier one
    are dropped first; ``report.kept`` lists the surviving input indices.
    With ``full=True`` the w summary carries the dense corrected covariance.
    """
    t0 = time.perf_counter()
    fixed = dict(fixed or {})
    if problem is None:
        init_problem = prepare(dataset, prior, config)
    else:
        init_problem = problem
    init = init_problem.init
    phi = float(fixed.get("phi", init.phi))
    tau2 = float(fixed.get("tau2", init.tau2))
    sigma2 = float(fixed.get("sigma2", init.sigma2))
    source = init_problem.dataset
    filtered, dropped = filter_close_points(source, phi, min_corr)
    kept = np.setdiff1d(np.arange(source.n), dropped)
    if dropped.size:
        init_problem = prepare(filtered, init_problem.prior, init_problem.config, init=init)
    prob = init_problem
    ds = prob.ordered
    factors = prob.geometry.factors(phi)
    t_setup = time.perf_counter() - t0
    inputs = fit_mfa_for_lr(ds, factors, tau2, sigma2)
    t_mfa = time.perf_counter() - t0 - t_setup
    H = build_hessian_alpha(inputs, ds)
    corr = lr_correct(inputs, H, full=full)
    p = inputs.p
    t_lr = time.perf_counter() - t0 - t_setup - t_mfa

    state = MfaVariational(inputs.mu_w, np.log(inputs.G))
    E_tau = 1.0 / tau2
    q_tau = update_tau2(ds, inputs.mu_w, float(np.sum(inputs.G)), E_tau, prob.prior, prob.qr)
    q_sigma = update_sigma2(mfa_prior_quadratic(state, factors), prob.prior, ds.n)

    w_var = prob.to_input_order(corr.var[p:])
    w_mean = prob.to_input_order(inputs.mu_w)
    if full:
        inv = prob.inverse_order
        cov = corr.full[p:, p:][np.ix_(inv, inv)]
        summary = GaussianSummary(w_mean, w_var, "dense", cov=cov)
    else:
        summary = GaussianSummary(w_mean, w_var, "diag")
    elapsed = time.perf_counter() - t0
    return FitReport(
        method="mfa-lr",
        dataset=prob.dataset,
        graph=prob.graph,
        beta=BetaPosterior(inputs.mu_beta, corr.beta_cov),
        q_tau=q_tau,
        q_sigma=q_sigma,
        phi=phi,
        w=summary,
        elbo_trace=np.empty(0),
        epochs=0,
        converged=True,
        timings={"setup": t_setup, "mfa": t_mfa, "correction": t_lr, "total": elapsed},
        state=inputs,
        prior=prob.prior,
        config=prob.config,
        kept=kept,
        extras={
            "init": init,
            "fixed": {"tau2": tau2, "sigma2": sigma2, "phi": phi},
            "mfa_var": prob.to_input_order(inputs.G),
            "mfa_beta_var": inputs.sigma2_beta,
            "dropped": dropped,
        },
    )
