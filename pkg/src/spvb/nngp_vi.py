"""Nearest-neighbor structured variational family for the spatial effects.

q(w) = N(eta, (I - A)^{-1} D (I - A)^{-T}) where A is strictly lower
triangular with at most ``m_q`` entries per row and D = diag(exp(2 gamma)).
All vectors here are indexed by processing position (see ``NeighborGraph``);
datasets passed to the gradient functions must already be in that order.

The joint variant extends the factor to (beta, w): beta's perturbation is
drawn first and feeds every w_i through the dense block ``a_beta``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from spvb import kernels
from spvb.config import FitConfig, PriorSpec
from spvb.conjugate import (
    BetaPosterior,
    Conjugates,
    PhiState,
    elbo_from_moments,
    gaussian_entropy_from_logdet,
    phi_elbo,
    update_beta,
    update_phi,
    update_sigma2,
    update_tau2,
)
from spvb.optim import AdaDeltaState, StoppingState, adadelta_step, make_batches, should_stop
from spvb.problem import STREAM_BATCHES, STREAM_MC, Problem, generator, prepare
from spvb.report import FitReport, GaussianSummary, nngp_marginal_variances
from spvb.spatial import NngpFactors, SpatialDataset, cond_residuals, prior_quadratic, reverse_scatter


@dataclass
class NngpVariational:
    """Free parameters of q(w).

    Attributes:
        eta: mean vector.
        a: ``(n, m_q)`` regression weights on variational neighbors, zero padded.
        gamma: log standard deviations, d_i = exp(2 gamma_i).
        nbr_q: ``(n, m_q)`` variational neighbor positions, ``-1`` padded.
    """

    eta: np.ndarray
    a: np.ndarray
    gamma: np.ndarray
    nbr_q: np.ndarray

    @property
    def n(self) -> int:
        return self.eta.shape[0]

    @property
    def d(self) -> np.ndarray:
        return np.exp(2.0 * self.gamma)

    def copy(self) -> "NngpVariational":
        return NngpVariational(self.eta.copy(), self.a.copy(), self.gamma.copy(), self.nbr_q)

    def dense_I_minus_A(self) -> np.ndarray:
        n = self.n
        M = np.eye(n)
        for t in range(self.nbr_q.shape[1]):
            rows = np.flatnonzero(self.nbr_q[:, t] >= 0)
            M[rows, self.nbr_q[rows, t]] -= self.a[rows, t]
        return M


@dataclass(frozen=True)
class McBatch:
    """Standard-normal draws and the matching solved perturbations."""

    xi: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class Expectations:
    E_inv_tau2: float
    E_inv_sigma2: float
    mu_beta: np.ndarray


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_u(state: NngpVariational, xi) -> np.ndarray:
    """Solve (I - A) u = D^{1/2} xi by forward substitution (rows of ``xi``)."""
    xi = np.asarray(xi, dtype=float)
    Xi = np.ascontiguousarray(np.atleast_2d(xi))
    if Xi.shape[1] != state.n:
        raise ValueError(f"xi has length {Xi.shape[1]}, expected {state.n}")
    u = np.empty_like(Xi)
    kernels.forward_solve(Xi, state.gamma, state.nbr_q, state.a, u)
    return u[0] if xi.ndim == 1 else u


def draw_batch(state: NngpVariational, rng: np.random.Generator, n_mc: int) -> McBatch:
    xi = rng.standard_normal((n_mc, state.n))
    return McBatch(xi, sample_u(state, xi))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _prior_pull(v: np.ndarray, factors: NngpFactors, weights) -> np.ndarray:
    """-grad of 0.5 sum_i wt_i (v_i - b_i v_N)^2 / F_i with respect to v."""
    r = cond_residuals(v, factors) / factors.F
    if weights is not None:
        r = r * weights
    return -r + reverse_scatter(r, factors.nbr, factors.b)


def mean_gradient(
    mean: np.ndarray,
    dataset: SpatialDataset,
    factors: NngpFactors,
    ex: Expectations,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the bound with respect to the mean of w (any Gaussian family).

    ``weights`` scales each location's data and prior terms (mini-batches).
    """
    resid = dataset.y - dataset.X @ ex.mu_beta - mean
    if weights is not None:
        resid = resid * weights
    return ex.E_inv_tau2 * resid + ex.E_inv_sigma2 * _prior_pull(mean, factors, weights)


def grad_eta(
    state: NngpVariational,
    dataset: SpatialDataset,
    factors: NngpFactors,
    ex: Expectations,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Exact gradient of the bound with respect to ``eta``."""
    return mean_gradient(state.eta, dataset, factors, ex, weights)


def grad_u(
    state: NngpVariational,
    factors: NngpFactors,
    ex: Expectations,
    u,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Per-draw gradient of the stochastic quadratic part with respect to ``u``."""
    u = np.asarray(u, dtype=float)
    data = -u if weights is None else -u * weights
    return ex.E_inv_tau2 * data + ex.E_inv_sigma2 * _prior_pull(u, factors, weights)


def grad_gamma_vanishing(
    state: NngpVariational,
    batch: McBatch,
    gu: np.ndarray,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """First-order (direct-path) gradient for ``gamma`` plus the entropy term."""
    gu = np.atleast_2d(gu)
    through = gu + reverse_scatter(gu, state.nbr_q, state.a)
    g = np.mean(np.exp(state.gamma) * np.atleast_2d(batch.xi) * through, axis=0)
    return g + (1.0 if weights is None else weights)


def grad_a_vanishing(state: NngpVariational, batch: McBatch, gu: np.ndarray) -> np.ndarray:
    """First-order gradient for the padded ``a`` array (zero on padded slots)."""
    out = np.empty_like(state.a)
    kernels.neighbor_products(
        np.ascontiguousarray(np.atleast_2d(batch.u)),
        np.ascontiguousarray(np.atleast_2d(gu)),
        state.nbr_q,
        out,
    )
    return out


def batch_weights(n: int, batch_indices) -> np.ndarray:
    idx = np.asarray(batch_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mini-batch is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("mini-batch index out of range")
    w = np.zeros(n)
    w[idx] = n / idx.size
    return w


def minibatch_elbo_grads(
    state: NngpVariational,
    dataset: SpatialDataset,
    batch_indices,
    factors: NngpFactors,
    ex: Expectations,
    batch: McBatch,
) -> dict:
    """Gradients of the mini-batch bound (terms of B scaled by n/|B|)."""
    w = batch_weights(state.n, batch_indices)
    gu = grad_u(state, factors, ex, batch.u, w)
    return {
        "eta": grad_eta(state, dataset, factors, ex, w),
        "gamma": grad_gamma_vanishing(state, batch, gu, w),
        "a": grad_a_vanishing(state, batch, gu),
    }


# ---------------------------------------------------------------------------
# Monte Carlo moments and the bound
# ---------------------------------------------------------------------------


def estimate_trace(batch: McBatch) -> float:
    """Unbiased estimate of tr Cov_q(w): mean squared norm of the draws."""
    u = np.atleast_2d(batch.u)
    return float(np.mean(np.einsum("ij,ij->i", u, u)))


def second_moment_fn(state: NngpVariational, batch: McBatch):
    """E_q[(w_i - b_i w_N)^2] per i, for any factors (used by the phi step)."""

    def fn(factors: NngpFactors) -> np.ndarray:
        re = cond_residuals(state.eta, factors)
        ru = cond_residuals(np.atleast_2d(batch.u), factors)
        return re * re + np.mean(ru * ru, axis=0)

    return fn


def estimate_prior_quadratic(
    state: NngpVariational, batch: McBatch, factors: NngpFactors
) -> float:
    return float(np.sum(second_moment_fn(state, batch)(factors) / factors.F))


def conditioned_quadratics(
    gamma: np.ndarray, xi: np.ndarray, u: np.ndarray, factors: NngpFactors
) -> tuple[float, float]:
    """Lower-variance draws of E||u||^2 and sum_i E[(u_i - b_i u_N)^2] / F_i.

    Each squared term is replaced by its expectation over the location's own
    innovation xi_i given the earlier draws: u_i^2 becomes
    d_i + (u_i - exp(gamma_i) xi_i)^2, and likewise for the conditional
    residual. Means are unchanged; the noise drops by more than an order of
    magnitude because the d_i xi_i^2 terms dominate both sums.
    """
    U = np.atleast_2d(u)
    shock = np.exp(gamma) * np.atleast_2d(xi)
    d = np.exp(2.0 * gamma)
    lag = U - shock
    res = cond_residuals(U, factors) - shock
    trace = float(np.sum(d) + np.mean(np.einsum("ij,ij->i", lag, lag)))
    quad = float(np.sum(d / factors.F) + np.mean((res * res) @ (1.0 / factors.F)))
    return trace, quad


def elbo_estimate(
    state: NngpVariational,
    dataset: SpatialDataset,
    factors: NngpFactors,
    conj: Conjugates,
    batch: McBatch,
    prior: PriorSpec,
) -> float:
    """Full bound with the u-quadratics replaced by their draw averages.

    The averages are the ``conditioned_quadratics`` versions, which keeps
    them unbiased while making the stopping statistic far less noisy.
    """
    n, p = dataset.n, dataset.p
    r = dataset.y - dataset.X @ conj.beta.mu_beta - state.eta
    xtx_vb = float(np.sum((dataset.X.T @ dataset.X) * conj.beta.V_beta))
    trace, quad_u = conditioned_quadratics(state.gamma, batch.xi, batch.u, factors)
    data_sq = float(r @ r) + xtx_vb + trace
    prior_quad = prior_quadratic(state.eta, factors) + quad_u
    _, logdet_vb = np.linalg.slogdet(conj.beta.V_beta)
    ent = gaussian_entropy_from_logdet(n, 2.0 * float(np.sum(state.gamma)))
    ent += gaussian_entropy_from_logdet(p, float(logdet_vb))
    return elbo_from_moments(
        n=n,
        data_sq=data_sq,
        prior_quad=prior_quad,
        logF_sum=float(np.sum(np.log(factors.F))),
        entropy_w_beta=ent,
        q_tau=conj.q_tau,
        q_sigma=conj.q_sigma,
        prior=prior,
    )


# ---------------------------------------------------------------------------
# Optimizer plumbing shared by both variants
# ---------------------------------------------------------------------------


class _Groups:
    """One AdaDelta state per parameter group."""

    def __init__(self, shapes: dict, cfg: FitConfig):
        self.opt = {
            k: AdaDeltaState.zeros(s, cfg.adadelta_rate, cfg.adadelta_noise)
            for k, s in shapes.items()
        }

    def steps(self, grads: dict) -> dict | None:
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            for o in self.opt.values():
                o.halve()
            return None
        return {k: adadelta_step(self.opt[k], g)[1] for k, g in grads.items()}


def _initial_state(problem: Problem) -> tuple[NngpVariational, float, float]:
    ds = problem.ordered
    init = problem.init
    eta0 = problem.qr.resid(ds.y)
    d0 = 1.0 / (1.0 / init.sigma2 + 1.0 / init.tau2)
    nbr_q = np.ascontiguousarray(problem.graph.nbr[:, : problem.config.m_q])
    state = NngpVariational(
        eta0.copy(), np.zeros(nbr_q.shape), np.full(ds.n, 0.5 * math.log(d0)), nbr_q
    )
    return state, 1.0 / init.tau2, 1.0 / init.sigma2


def _phi_step(problem, phi_state, E_sigma, moment_fn, opt):
    bounds = problem.bounds

    def objective(phi):
        return phi_elbo(phi, problem.geometry, E_sigma, moment_fn, bounds)

    return update_phi(phi_state, objective, bounds, opt, problem.config.phi_grad_step)


def nngp_summary(state: NngpVariational, order: np.ndarray, lowrank=None) -> GaussianSummary:
    """Input-order summary of an NNGP factor held in processing order ``order``."""
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    var = nngp_marginal_variances(state.gamma, state.nbr_q, state.a)
    if lowrank is not None:
        var = var + np.sum(lowrank * lowrank, axis=1)
    return GaussianSummary(
        mean=state.eta[inv],
        var=var[inv],
        kind="nngp",
        order=order,
        gamma=state.gamma.copy(),
        a=state.a.copy(),
        nbr=state.nbr_q,
        lowrank=lowrank,
    )


def joint_summary(state: "JointVariational", order: np.ndarray) -> GaussianSummary:
    return nngp_summary(state.w_part, order, lowrank=_joint_lowrank(state))


def _summary_from_state(problem: Problem, state: NngpVariational, lowrank=None) -> GaussianSummary:
    return nngp_summary(state, problem.graph.order, lowrank)


# ---------------------------------------------------------------------------
# Independent variant
# ---------------------------------------------------------------------------


def fit_spvb_nngp(
    dataset: SpatialDataset,
    prior: PriorSpec | None = None,
    config: FitConfig | None = None,
    problem: Problem | None = None,
    fixed: dict | None = None,
) -> FitReport:
    """Coordinate and stochastic-gradient ascent for the NNGP family.

    ``fixed`` may pin ``tau2``, ``sigma2`` and/or ``phi`` (diagnostics only).
    """
    t0 = time.perf_counter()
    problem = problem or prepare(dataset, prior, config)
    cfg, prior, ds = problem.config, problem.prior, problem.ordered
    fixed = fixed or {}
    state, E_tau, E_sigma = _initial_state(problem)
    if "tau2" in fixed:
        E_tau = 1.0 / fixed["tau2"]
    if "sigma2" in fixed:
        E_sigma = 1.0 / fixed["sigma2"]
    phi_state = PhiState(float(np.clip(fixed.get("phi", problem.init.phi), *problem.bounds)))
    factors = problem.geometry.factors(phi_state.phi)
    rng = generator(cfg.rng_seed, STREAM_MC)
    batch_rng = generator(cfg.rng_seed, STREAM_BATCHES)
    batch = draw_batch(state, rng, cfg.n_mc)
    groups = _Groups({"eta": ds.n, "gamma": ds.n, "a": state.a.shape}, cfg)
    phi_opt = AdaDeltaState.zeros(1, cfg.adadelta_rate, cfg.adadelta_noise)
    stop = StoppingState(cfg.stop_window, cfg.stop_patience)
    trace: list[float] = []
    converged = False
    t_setup = time.perf_counter() - t0

    for epoch in range(1, cfg.max_epochs + 1):
        # Step 1-3: closed-form factors
        beta = update_beta(ds, state.eta, E_tau, problem.qr)
        q_tau = update_tau2(ds, state.eta, estimate_trace(batch), E_tau, prior, problem.qr)
        if "tau2" not in fixed:
            E_tau = q_tau.mean_inv
        q_sigma = update_sigma2(estimate_prior_quadratic(state, batch, factors), prior, ds.n)
        if "sigma2" not in fixed:
            E_sigma = q_sigma.mean_inv
        # Step 4: point-mass phi
        if "phi" not in fixed:
            phi_state = _phi_step(problem, phi_state, E_sigma, second_moment_fn(state, batch), phi_opt)
            factors = problem.geometry.factors(phi_state.phi)
        # Step 5: q(w) parameters
        ex = Expectations(E_tau, E_sigma, beta.mu_beta)
        for idx in make_batches(ds.n, cfg.batch_size, batch_rng):
            weights = None if idx.size == ds.n else batch_weights(ds.n, idx)
            gu = grad_u(state, factors, ex, batch.u, weights)
            steps = groups.steps({
                "eta": grad_eta(state, ds, factors, ex, weights),
                "gamma": grad_gamma_vanishing(state, batch, gu, weights),
                "a": grad_a_vanishing(state, batch, gu),
            })
            if steps is not None:
                state.eta += steps["eta"]
                state.gamma += steps["gamma"]
                state.a += steps["a"]
            batch = draw_batch(state, rng, cfg.n_mc)
        conj = Conjugates(beta, q_tau, q_sigma)
        value = elbo_estimate(state, ds, factors, conj, batch, prior)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite ELBO at epoch {epoch}")
        trace.append(value)
        if should_stop(stop, value):
            converged = True
            break
    t_loop = time.perf_counter() - t0 - t_setup

    # closing conjugate pass so reported factors match the final q(w)
    beta = update_beta(ds, state.eta, E_tau, problem.qr)
    q_tau = update_tau2(ds, state.eta, estimate_trace(batch), E_tau, prior, problem.qr)
    q_sigma = update_sigma2(estimate_prior_quadratic(state, batch, factors), prior, ds.n)
    elapsed = time.perf_counter() - t0
    return FitReport(
        method="nngp",
        dataset=problem.dataset,
        graph=problem.graph,
        beta=beta,
        q_tau=q_tau,
        q_sigma=q_sigma,
        phi=phi_state.phi,
        w=_summary_from_state(problem, state),
        elbo_trace=np.asarray(trace),
        epochs=len(trace),
        converged=converged,
        timings={"setup": t_setup, "loop": t_loop, "total": elapsed, "per_epoch": t_loop / max(len(trace), 1)},
        state=state,
        prior=prior,
        config=cfg,
        extras={"init": problem.init, "stop_averages": np.asarray(stop.averages)},
    )


# ---------------------------------------------------------------------------
# Joint (beta, w) variant
# ---------------------------------------------------------------------------


@dataclass
class JointVariational:
    """Free parameters of the joint factor q(beta, w).

    Attributes:
        mu_beta: mean of beta.
        eta: mean of w.
        l_beta: ``(p, p)`` strictly lower block among the beta coordinates.
        gamma_beta: log standard deviations for the beta rows.
        a_beta: ``(n, p)`` dependence of each w_i on the beta perturbation.
        a, gamma, nbr_q: as in ``NngpVariational``.
    """

    mu_beta: np.ndarray
    eta: np.ndarray
    l_beta: np.ndarray
    gamma_beta: np.ndarray
    a_beta: np.ndarray
    a: np.ndarray
    gamma: np.ndarray
    nbr_q: np.ndarray

    @property
    def w_part(self) -> NngpVariational:
        return NngpVariational(self.eta, self.a, self.gamma, self.nbr_q)

    def beta_factor(self) -> np.ndarray:
        """(I - L_beta)^{-1} diag(exp(gamma_beta)), the Cholesky factor of Cov(beta)."""
        from scipy.linalg import solve_triangular

        p = self.mu_beta.shape[0]
        return solve_triangular(np.eye(p) - self.l_beta, np.diag(np.exp(self.gamma_beta)), lower=True)

    def beta_cov(self) -> np.ndarray:
        Lb = self.beta_factor()
        return Lb @ Lb.T


@dataclass(frozen=True)
class JointBatch:
    xi_beta: np.ndarray
    xi: np.ndarray
    u_beta: np.ndarray
    u: np.ndarray


def sample_joint(state: JointVariational, xi_beta, xi) -> tuple[np.ndarray, np.ndarray]:
    """Back-solve for (u_beta, u_w) given standard-normal rows."""
    Xb = np.ascontiguousarray(np.atleast_2d(np.asarray(xi_beta, dtype=float)))
    Xw = np.ascontiguousarray(np.atleast_2d(np.asarray(xi, dtype=float)))
    p = state.mu_beta.shape[0]
    ub = np.empty_like(Xb)
    for j in range(p):
        ub[:, j] = math.exp(state.gamma_beta[j]) * Xb[:, j] + ub[:, :j] @ state.l_beta[j, :j]
    shift = np.ascontiguousarray(ub @ state.a_beta.T)
    u = np.empty_like(Xw)
    kernels.forward_solve_shift(Xw, state.gamma, shift, state.nbr_q, state.a, u)
    return ub, u


def draw_joint_batch(state: JointVariational, rng: np.random.Generator, n_mc: int) -> JointBatch:
    xi_beta = rng.standard_normal((n_mc, state.mu_beta.shape[0]))
    xi = rng.standard_normal((n_mc, state.eta.shape[0]))
    ub, u = sample_joint(state, xi_beta, xi)
    return JointBatch(xi_beta, xi, ub, u)


def joint_gradients(
    state: JointVariational,
    dataset: SpatialDataset,
    factors: NngpFactors,
    E_tau: float,
    E_sigma: float,
    batch: JointBatch,
    weights: np.ndarray | None = None,
) -> dict:
    """Gradients for every block of the joint factor except ``mu_beta``.

    Paths through the back-solve are truncated to direct dependencies; the
    beta rows count as neighbors of every w_i.
    """
    X = dataset.X
    ex = Expectations(E_tau, E_sigma, state.mu_beta)
    w_state = state.w_part
    fitted = batch.u + batch.u_beta @ X.T
    data = -fitted if weights is None else -fitted * weights
    gu = E_tau * data + E_sigma * _prior_pull(batch.u, factors, weights)
    gb = E_tau * data @ X
    S = gu.shape[0]
    wb = McBatch(batch.xi, batch.u)
    through_b = gb + gb @ state.l_beta + gu @ state.a_beta
    g_gamma_beta = np.mean(np.exp(state.gamma_beta) * batch.xi_beta * through_b, axis=0) + 1.0
    g_l = np.tril((gb.T @ batch.u_beta) / S, k=-1)
    return {
        "eta": grad_eta(w_state, dataset, factors, ex, weights),
        "gamma": grad_gamma_vanishing(w_state, wb, gu, weights),
        "a": grad_a_vanishing(w_state, wb, gu),
        "a_beta": (gu.T @ batch.u_beta) / S,
        "gamma_beta": g_gamma_beta,
        "l_beta": g_l,
    }


def joint_second_moment(batch: JointBatch, X: np.ndarray) -> float:
    """Draw average of ||X u_beta + u_w||^2."""
    f = batch.u + batch.u_beta @ X.T
    return float(np.mean(np.einsum("ij,ij->i", f, f)))


def joint_elbo_estimate(state, dataset, factors, q_tau, q_sigma, batch, prior) -> float:
    n, p = dataset.n, dataset.p
    r = dataset.y - dataset.X @ state.mu_beta - state.eta
    # the beta perturbation is conditioned on, so it stays inside the lagged part
    total = batch.u + batch.u_beta @ dataset.X.T
    trace, _ = conditioned_quadratics(state.gamma, batch.xi, total, factors)
    _, quad_u = conditioned_quadratics(state.gamma, batch.xi, batch.u, factors)
    ent = gaussian_entropy_from_logdet(
        n + p, 2.0 * float(np.sum(state.gamma) + np.sum(state.gamma_beta))
    )
    return elbo_from_moments(
        n=n,
        data_sq=float(r @ r) + trace,
        prior_quad=prior_quadratic(state.eta, factors) + quad_u,
        logF_sum=float(np.sum(np.log(factors.F))),
        entropy_w_beta=ent,
        q_tau=q_tau,
        q_sigma=q_sigma,
        prior=prior,
    )


def _joint_initial_state(problem: Problem) -> tuple[JointVariational, float, float]:
    base, E_tau, E_sigma = _initial_state(problem)
    p = problem.ordered.p
    Vb = problem.qr.XtX_inv / E_tau
    # Vb = (I - L)^{-1} D (I - L)^{-T}: read L and D off the Cholesky factor
    C = np.linalg.cholesky(Vb)
    diag = np.diag(C)
    unit = C / diag
    l_beta = np.tril(np.eye(p) - np.linalg.inv(unit), k=-1)
    mu_beta = problem.qr.coef(problem.ordered.y - base.eta)
    state = JointVariational(
        mu_beta, base.eta, l_beta, np.log(diag), np.zeros((problem.ordered.n, p)),
        base.a, base.gamma, base.nbr_q,
    )
    return state, E_tau, E_sigma


def _joint_lowrank(state: JointVariational) -> np.ndarray:
    """(I - A)^{-1} A_beta C_beta: the beta-driven part of Cov(w), as an n x p factor."""
    Z = np.ascontiguousarray((state.a_beta @ state.beta_factor()).T)
    out = np.empty_like(Z)
    zero = np.zeros_like(Z)
    kernels.forward_solve_shift(zero, state.gamma, Z, state.nbr_q, state.a, out)
    return out.T.copy()


def fit_spvb_nngp_joint(
    dataset: SpatialDataset,
    prior: PriorSpec | None = None,
    config: FitConfig | None = None,
    problem: Problem | None = None,
) -> FitReport:
    """Same loop as ``fit_spvb_nngp`` with beta inside the structured factor."""
    t0 = time.perf_counter()
    problem = problem or prepare(dataset, prior, config)
    cfg, prior, ds = problem.config, problem.prior, problem.ordered
    state, E_tau, E_sigma = _joint_initial_state(problem)
    phi_state = PhiState(float(np.clip(problem.init.phi, *problem.bounds)))
    factors = problem.geometry.factors(phi_state.phi)
    rng = generator(cfg.rng_seed, STREAM_MC)
    batch_rng = generator(cfg.rng_seed, STREAM_BATCHES)
    batch = draw_joint_batch(state, rng, cfg.n_mc)
    shapes = {
        "eta": ds.n, "gamma": ds.n, "a": state.a.shape, "a_beta": state.a_beta.shape,
        "gamma_beta": ds.p, "l_beta": state.l_beta.shape,
    }
    groups = _Groups(shapes, cfg)
    phi_opt = AdaDeltaState.zeros(1, cfg.adadelta_rate, cfg.adadelta_noise)
    stop = StoppingState(cfg.stop_window, cfg.stop_patience)
    trace: list[float] = []
    converged = False
    t_setup = time.perf_counter() - t0

    def conjugate_pass(state, batch, E_tau):
        state.mu_beta = problem.qr.coef(ds.y - state.eta)
        q_tau = update_tau2(
            ds, state.eta, 0.0, E_tau, prior, problem.qr,
            beta_w_second_moment=joint_second_moment(batch, ds.X),
        )
        wb = McBatch(batch.xi, batch.u)
        q_sigma = update_sigma2(estimate_prior_quadratic(state.w_part, wb, factors), prior, ds.n)
        return q_tau, q_sigma

    for epoch in range(1, cfg.max_epochs + 1):
        q_tau, q_sigma = conjugate_pass(state, batch, E_tau)
        E_tau, E_sigma = q_tau.mean_inv, q_sigma.mean_inv
        wb = McBatch(batch.xi, batch.u)
        phi_state = _phi_step(problem, phi_state, E_sigma, second_moment_fn(state.w_part, wb), phi_opt)
        factors = problem.geometry.factors(phi_state.phi)
        for idx in make_batches(ds.n, cfg.batch_size, batch_rng):
            weights = None if idx.size == ds.n else batch_weights(ds.n, idx)
            steps = groups.steps(joint_gradients(state, ds, factors, E_tau, E_sigma, batch, weights))
            if steps is not None:
                state.eta += steps["eta"]
                state.gamma += steps["gamma"]
                state.a += steps["a"]
                state.a_beta += steps["a_beta"]
                state.gamma_beta += steps["gamma_beta"]
                state.l_beta += steps["l_beta"]
            batch = draw_joint_batch(state, rng, cfg.n_mc)
        value = joint_elbo_estimate(state, ds, factors, q_tau, q_sigma, batch, prior)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite ELBO at epoch {epoch}")
        trace.append(value)
        if should_stop(stop, value):
            converged = True
            break
    t_loop = time.perf_counter() - t0 - t_setup

    q_tau, q_sigma = conjugate_pass(state, batch, E_tau)
    beta = BetaPosterior(state.mu_beta.copy(), state.beta_cov())
    elapsed = time.perf_counter() - t0
    return FitReport(
        method="nngp-joint",
        dataset=problem.dataset,
        graph=problem.graph,
        beta=beta,
        q_tau=q_tau,
        q_sigma=q_sigma,
        phi=phi_state.phi,
        w=_summary_from_state(problem, state.w_part, lowrank=_joint_lowrank(state)),
        elbo_trace=np.asarray(trace),
        epochs=len(trace),
        converged=converged,
        timings={"setup": t_setup, "loop": t_loop, "total": elapsed, "per_epoch": t_loop / max(len(trace), 1)},
        state=state,
        prior=prior,
        config=cfg,
        extras={"init": problem.init, "stop_averages": np.asarray(stop.averages)},
    )


__all__ = [
    "Expectations",
    "JointBatch",
    "JointVariational",
    "McBatch",
    "NngpVariational",
    "conditioned_quadratics",
    "draw_batch",
    "draw_joint_batch",
    "elbo_estimate",
    "estimate_prior_quadratic",
    "estimate_trace",
    "fit_spvb_nngp",
    "fit_spvb_nngp_joint",
    "grad_a_vanishing",
    "grad_eta",
    "grad_gamma_vanishing",
    "grad_u",
    "joint_gradients",
    "joint_summary",
    "nngp_summary",
    "minibatch_elbo_grads",
    "sample_joint",
    "sample_u",
    "second_moment_fn",
]
