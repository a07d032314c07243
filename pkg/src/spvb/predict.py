"""Composition sampling of w and y at new locations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from spvb.nngp_vi import JointVariational, NngpVariational, sample_joint, sample_u
from spvb.problem import STREAM_PREDICT, generator
from spvb.report import FitReport
from spvb.spatial import SpatialError, exp_correlation, pairwise_distances

DEFAULT_SAMPLES = 1000
QUANTILES = (0.025, 0.5, 0.975)
_DRAW_CHUNK = 200


@dataclass(frozen=True)
class PredictionDraws:
    """Draws of shape ``(n_samples, r)`` and per-location summaries."""

    w_draws: np.ndarray
    y_draws: np.ndarray
    beta_draws: np.ndarray
    tau2_draws: np.ndarray
    noise_draws: np.ndarray

    @staticmethod
    def _summary(D: np.ndarray) -> dict:
        q = np.quantile(D, QUANTILES, axis=0, method="linear")
        return {
            "mean": D.mean(axis=0),
            "var": D.var(axis=0, ddof=1),
            "q025": q[0],
            "q500": q[1],
            "q975": q[2],
        }

    def w_summary(self) -> dict:
        return self._summary(self.w_draws)

    def y_summary(self) -> dict:
        return self._summary(self.y_draws)


@dataclass(frozen=True)
class NewSiteFactors:
    """Kriging weights of each new site on its observed neighbors (unit sill)."""

    nbr: np.ndarray
    b: np.ndarray
    F: np.ndarray


def new_site_factors(obs_coords, new_coords, m: int, phi: float) -> NewSiteFactors:
    """Weights on the ``m`` nearest observed locations; rows of ``obs_coords``."""
    obs = np.asarray(obs_coords, dtype=float)
    new = np.asarray(new_coords, dtype=float)
    if obs.shape[0] < 1:
        raise SpatialError("prediction needs at least one observed location")
    k = min(m, obs.shape[0])
    dist, nbr = cKDTree(obs).query(new, k=k)
    nbr = np.asarray(nbr).reshape(new.shape[0], k)
    dist = np.asarray(dist).reshape(new.shape[0], k)
    b = np.zeros((new.shape[0], k))
    F = np.empty(new.shape[0])
    for j in range(new.shape[0]):
        pts = obs[nbr[j]]
        R = exp_correlation(pairwise_distances(pts), phi)
        r = exp_correlation(dist[j], phi)
        try:
            c, low = linalg.cho_factor(R, lower=True)
            b[j] = linalg.cho_solve((c, low), r)
        except linalg.LinAlgError:
            b[j] = linalg.lstsq(R, r)[0]
        F[j] = max(1.0 - float(r @ b[j]), 0.0)
    return NewSiteFactors(nbr, b, F)


def _inverse_gamma(rng, q, size):
    return q.scale / rng.gamma(q.shape, 1.0, size=size)


def _observed_draws(fit: FitReport, rng, S: int):
    """Return (beta draws (S, p), w draws (S, n) in processing order, coords in that order)."""
    state = fit.state
    p = fit.beta.mu_beta.shape[0]
    if isinstance(state, JointVariational):
        order = fit.graph.order
        xi_b = rng.standard_normal((S, p))
        xi = rng.standard_normal((S, state.eta.shape[0]))
        ub, u = sample_joint(state, xi_b, xi)
        return fit.beta.mu_beta + ub, state.eta + u, fit.dataset.coords[order]
    Lb = np.linalg.cholesky(fit.beta.V_beta)
    beta = fit.beta.mu_beta + rng.standard_normal((S, p)) @ Lb.T
    if isinstance(state, NngpVariational):
        order = fit.graph.order
        xi = rng.standard_normal((S, state.n))
        return beta, state.eta + sample_u(state, xi), fit.dataset.coords[order]
    w = fit.w.mean + np.sqrt(fit.w.var) * rng.standard_normal((S, fit.w.n))
    return beta, w, fit.dataset.coords


def predict(
    fit: FitReport, new_coords, new_X, n_samples: int = DEFAULT_SAMPLES, seed: int | None = None
) -> PredictionDraws:
    """Predictive draws of w and y at ``new_coords`` given covariates ``new_X``.

    Each draw samples beta, tau2, sigma2 and the observed w from the fitted
    factors (phi is a point mass), then w at every new site from its
    conditional given its nearest observed neighbors, then y. Sites are
    predicted independently of each other.
    """
    new_coords = np.atleast_2d(np.asarray(new_coords, dtype=float))
    new_X = np.atleast_2d(np.asarray(new_X, dtype=float))
    p = fit.beta.mu_beta.shape[0]
    if new_X.shape[1] != p:
        raise ValueError(f"new_X has {new_X.shape[1]} columns, the fit has p={p}")
    if new_X.shape[0] != new_coords.shape[0] or new_coords.shape[1] != 2:
        raise ValueError("new_coords must be (r, 2) with one covariate row per location")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    seed = fit.config.rng_seed if seed is None else seed
    rng = generator(seed, STREAM_PREDICT)
    r = new_coords.shape[0]
    w_out = np.empty((n_samples, r))
    y_out = np.empty((n_samples, r))
    beta_out = np.empty((n_samples, p))
    tau_out = np.empty(n_samples)
    noise_out = np.empty((n_samples, r))
    site = None
    for start in range(0, n_samples, _DRAW_CHUNK):
        S = min(_DRAW_CHUNK, n_samples - start)
        sl = slice(start, start + S)
        tau2 = _inverse_gamma(rng, fit.q_tau, S)
        sigma2 = _inverse_gamma(rng, fit.q_sigma, S)
        beta, w_obs, obs_coords = _observed_draws(fit, rng, S)
        if site is None:
            site = new_site_factors(obs_coords, new_coords, fit.config.m, fit.phi)
        mean0 = np.einsum("sjk,jk->sj", w_obs[:, site.nbr], site.b)
        w0 = mean0 + np.sqrt(sigma2[:, None] * site.F[None, :]) * rng.standard_normal((S, r))
        noise = np.sqrt(tau2)[:, None] * rng.standard_normal((S, r))
        w_out[sl] = w0
        y_out[sl] = beta @ new_X.T + w0 + noise
        noise_out[sl] = noise
        beta_out[sl] = beta
        tau_out[sl] = tau2
    return PredictionDraws(w_out, y_out, beta_out, tau_out, noise_out)
