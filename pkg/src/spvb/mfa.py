"""Mean-field Gaussian q(w) with closed-form gradients; no Monte Carlo."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from spvb.config import FitConfig, PriorSpec
from spvb.conjugate import (
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
from spvb.nngp_vi import Expectations, _Groups, batch_weights, mean_gradient
from spvb.optim import AdaDeltaState, StoppingState, make_batches, should_stop
from spvb.problem import STREAM_BATCHES, Problem, generator, prepare
from spvb.report import FitReport, GaussianSummary
from spvb.spatial import NngpFactors, SpatialDataset, cond_residuals, reverse_scatter


@dataclass
class MfaVariational:
    """q(w) = prod_i N(mu_w[i], exp(J[i])), processing order."""

    mu_w: np.ndarray
    J: np.ndarray

    @property
    def G(self) -> np.ndarray:
        return np.exp(self.J)


def precision_weights(factors: NngpFactors) -> np.ndarray:
    """c_i = 1/F_i + sum_{l: i in N[l]} b_{l,i}^2 / F_l (diagonal of the unit-sill precision)."""
    return 1.0 / factors.F + reverse_scatter(1.0 / factors.F, factors.nbr, factors.b**2)


def grad_mu_w(state: MfaVariational, dataset: SpatialDataset, factors: NngpFactors, ex: Expectations, weights=None):
    return mean_gradient(state.mu_w, dataset, factors, ex, weights)


def grad_J(state: MfaVariational, factors: NngpFactors, ex: Expectations, weights=None) -> np.ndarray:
    if weights is None:
        c = precision_weights(factors)
        lik = ex.E_inv_tau2
        ent = 1.0
    else:
        c = weights / factors.F + reverse_scatter(weights / factors.F, factors.nbr, factors.b**2)
        lik = ex.E_inv_tau2 * weights
        ent = weights
    G = np.exp(state.J)
    return (-0.5 * lik - 0.5 * ex.E_inv_sigma2 * c) * G + 0.5 * ent


def mfa_second_moment(state: MfaVariational):
    """E_q[(w_i - b_i w_N)^2] in closed form, as a function of the factors."""
    G = np.exp(state.J)

    def fn(factors: NngpFactors) -> np.ndarray:
        r = cond_residuals(state.mu_w, factors)
        safe = np.where(factors.nbr >= 0, factors.nbr, 0)
        return r * r + G + np.sum(factors.b**2 * G[safe], axis=1)

    return fn


def mfa_prior_quadratic(state: MfaVariational, factors: NngpFactors) -> float:
    return float(np.sum(mfa_second_moment(state)(factors) / factors.F))


def mfa_elbo(state, dataset, factors, conj: Conjugates, prior: PriorSpec) -> float:
    """Analytic bound for the mean-field family."""
    n, p = dataset.n, dataset.p
    r = dataset.y - dataset.X @ conj.beta.mu_beta - state.mu_w
    xtx_vb = float(np.sum((dataset.X.T @ dataset.X) * conj.beta.V_beta))
    _, logdet_vb = np.linalg.slogdet(conj.beta.V_beta)
    ent = gaussian_entropy_from_logdet(n, float(np.sum(state.J)))
    ent += gaussian_entropy_from_logdet(p, float(logdet_vb))
    return elbo_from_moments(
        n=n,
        data_sq=float(r @ r) + xtx_vb + float(np.sum(np.exp(state.J))),
        prior_quad=mfa_prior_quadratic(state, factors),
        logF_sum=float(np.sum(np.log(factors.F))),
        entropy_w_beta=ent,
        q_tau=conj.q_tau,
        q_sigma=conj.q_sigma,
        prior=prior,
    )


def fit_spvb_mfa(
    dataset: SpatialDataset,
    prior: PriorSpec | None = None,
    config: FitConfig | None = None,
    problem: Problem | None = None,
    fixed: dict | None = None,
) -> FitReport:
    """Mean-field fit; ``fixed`` may pin ``tau2``, ``sigma2`` and/or ``phi``."""
    t0 = time.perf_counter()
    if config is None and problem is None:
        config = FitConfig(max_epochs=1000)
    problem = problem or prepare(dataset, prior, config)
    cfg, prior, ds = problem.config, problem.prior, problem.ordered
    fixed = fixed or {}
    init = problem.init
    d0 = 1.0 / (1.0 / init.sigma2 + 1.0 / init.tau2)
    state = MfaVariational(problem.qr.resid(ds.y), np.full(ds.n, math.log(d0)))
    E_tau = 1.0 / fixed.get("tau2", init.tau2)
    E_sigma = 1.0 / fixed.get("sigma2", init.sigma2)
    phi_state = PhiState(float(np.clip(fixed.get("phi", init.phi), *problem.bounds)))
    factors = problem.geometry.factors(phi_state.phi)
    batch_rng = generator(cfg.rng_seed, STREAM_BATCHES)
    groups = _Groups({"mu_w": ds.n, "J": ds.n}, cfg)
    phi_opt = AdaDeltaState.zeros(1, cfg.adadelta_rate, cfg.adadelta_noise)
    stop = StoppingState(cfg.stop_window, cfg.stop_patience)
    trace: list[float] = []
    converged = False
    t_setup = time.perf_counter() - t0

    def conjugate_pass(E_tau):
        beta = update_beta(ds, state.mu_w, E_tau, problem.qr)
        q_tau = update_tau2(ds, state.mu_w, float(np.sum(np.exp(state.J))), E_tau, prior, problem.qr)
        q_sigma = update_sigma2(mfa_prior_quadratic(state, factors), prior, ds.n)
        return beta, q_tau, q_sigma

    for epoch in range(1, cfg.max_epochs + 1):
        beta, q_tau, q_sigma = conjugate_pass(E_tau)
        if "tau2" not in fixed:
            E_tau = q_tau.mean_inv
        if "sigma2" not in fixed:
            E_sigma = q_sigma.mean_inv
        if "phi" not in fixed:
            moment = mfa_second_moment(state)
            phi_state = update_phi(
                phi_state,
                lambda phi: phi_elbo(phi, problem.geometry, E_sigma, moment, problem.bounds),
                problem.bounds,
                phi_opt,
                cfg.phi_grad_step,
            )
            factors = problem.geometry.factors(phi_state.phi)
        ex = Expectations(E_tau, E_sigma, beta.mu_beta)
        for idx in make_batches(ds.n, cfg.batch_size, batch_rng):
            weights = None if idx.size == ds.n else batch_weights(ds.n, idx)
            steps = groups.steps({
                "mu_w": grad_mu_w(state, ds, factors, ex, weights),
                "J": grad_J(state, factors, ex, weights),
            })
            if steps is not None:
                state.mu_w += steps["mu_w"]
                state.J += steps["J"]
        value = mfa_elbo(state, ds, factors, Conjugates(beta, q_tau, q_sigma), prior)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite ELBO at epoch {epoch}")
        trace.append(value)
        if should_stop(stop, value):
            converged = True
            break
    t_loop = time.perf_counter() - t0 - t_setup

    beta, q_tau, q_sigma = conjugate_pass(E_tau)
    elapsed = time.perf_counter() - t0
    summary = GaussianSummary(
        mean=problem.to_input_order(state.mu_w),
        var=problem.to_input_order(np.exp(state.J)),
        kind="diag",
    )
    return FitReport(
        method="mfa",
        dataset=problem.dataset,
        graph=problem.graph,
        beta=beta,
        q_tau=q_tau,
        q_sigma=q_sigma,
        phi=phi_state.phi,
        w=summary,
        elbo_trace=np.asarray(trace),
        epochs=len(trace),
        converged=converged,
        timings={"setup": t_setup, "loop": t_loop, "total": elapsed, "per_epoch": t_loop / max(len(trace), 1)},
        state=state,
        prior=prior,
        config=cfg,
        extras={"init": init, "stop_averages": np.asarray(stop.averages)},
    )
