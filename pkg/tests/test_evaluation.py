import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import dense_exp_cov
from spvb.evaluation import (
    DENSE_MAX_N,
    ReferencePosterior,
    SimSpec,
    Truth,
    coverage_95,
    crps_samples,
    gaussian_intervals,
    interval_score_95,
    kl_gaussian,
    reference_posterior,
    simulate,
    truth_of,
    w_metrics,
)
from spvb.report import GaussianSummary
from spvb.spatial import SpatialDataset, build_neighbor_graph, nngp_factors, nngp_precision


def random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + 0.5 * np.eye(n)


def dense_kl(m0, S0, m1, S1):
    """KL(N(m0, S0) || N(m1, S1)) by the textbook formula with explicit inverses."""
    k = m0.size
    S1inv = np.linalg.inv(S1)
    d = m1 - m0
    return 0.5 * (np.trace(S1inv @ S0) + d @ S1inv @ d - k + np.log(np.linalg.det(S1) / np.linalg.det(S0)))


def gaussian_crps(mu, sd, x):
    z = (x - mu) / sd
    return sd * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - 1 / math.sqrt(math.pi))


# --- simulation -------------------------------------------------------------


def test_simulation_defaults():
    s = SimSpec()
    assert (s.n, s.domain_side, s.beta_true) == (1000, 10.0, (2.0, 5.0))
    assert (s.tau2_true, s.sigma2_true, s.phi_true, s.m_gen) == (0.5, 10.0, 1.0, 15)


def test_simulation_shapes_and_determinism():
    a, wa = simulate(SimSpec(n=50, seed=4))
    b, wb = simulate(SimSpec(n=50, seed=4))
    c, _ = simulate(SimSpec(n=50, seed=5))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(wa, wb)
    assert not np.array_equal(a.y, c.y)
    assert a.coords.min() >= 0 and a.coords.max() <= 10
    assert a.X.shape == (50, 2)


def test_simulation_without_noise_or_field_is_linear():
    ds, w = simulate(SimSpec(n=30, tau2_true=0.0, sigma2_true=0.0, seed=1))
    np.testing.assert_array_equal(w, 0.0)
    np.testing.assert_allclose(ds.y, ds.X @ np.array([2.0, 5.0]), rtol=0, atol=1e-14)


def test_simulated_field_has_sill_variance():
    _, w = simulate(SimSpec(n=10_000, seed=2, domain_side=100.0))
    assert np.var(w) == pytest.approx(10.0, rel=0.15)


def test_single_location_simulation():
    ds, w = simulate(SimSpec(n=1, seed=0))
    assert ds.n == 1 and w.shape == (1,)


def test_simspec_validation():
    with pytest.raises(ValueError):
        SimSpec(n=0)
    with pytest.raises(ValueError):
        SimSpec(tau2_true=-1.0)
    with pytest.raises(ValueError):
        SimSpec(phi_true=0.0)


# --- reference posterior --------------------------------------------------------


def _ref_problem(n=60, seed=0, tau2=0.5):
    spec = SimSpec(n=n, seed=seed, tau2_true=tau2)
    ds, _ = simulate(spec)
    g = build_neighbor_graph(ds.coords, 10)
    return ds, g, truth_of(spec)


def test_reference_mean_solves_normal_equations():
    ds, g, t = _ref_problem()
    ref = reference_posterior(ds, g, t)
    f = nngp_factors(ds.coords, g, t.phi)
    inv = np.argsort(g.order)
    Cinv = nngp_precision(f, t.sigma2).toarray()[np.ix_(inv, inv)]
    lhs = (np.eye(ds.n) / t.tau2 + Cinv) @ ref.mean
    assert np.max(np.abs(lhs - (ds.y - ds.X @ t.beta) / t.tau2)) < 1e-8


def test_reference_precision_and_covariance_forms_agree():
    ds, g, t = _ref_problem()
    ref = reference_posterior(ds, g, t)
    f = nngp_factors(ds.coords, g, t.phi)
    inv = np.argsort(g.order)
    Ct = np.linalg.inv(nngp_precision(f, t.sigma2).toarray())[np.ix_(inv, inv)]
    # covariance route: Ct - Ct (Ct + tau2 I)^{-1} Ct
    cov = Ct - Ct @ np.linalg.solve(Ct + t.tau2 * np.eye(ds.n), Ct)
    mean = Ct @ np.linalg.solve(Ct + t.tau2 * np.eye(ds.n), ds.y - ds.X @ t.beta)
    assert np.max(np.abs(ref.cov - cov)) < 1e-8
    assert np.max(np.abs(ref.mean - mean)) < 1e-8


def test_reference_limits():
    ds, g, t = _ref_problem(n=40)
    loud = reference_posterior(ds, g, Truth(t.beta, 1e-10, t.sigma2, t.phi))
    np.testing.assert_allclose(loud.mean, ds.y - ds.X @ t.beta, atol=1e-6)
    quiet = reference_posterior(ds, g, Truth(t.beta, math.inf, t.sigma2, t.phi))
    np.testing.assert_array_equal(quiet.mean, 0.0)
    f = nngp_factors(ds.coords, g, t.phi)
    inv = np.argsort(g.order)
    Ct = np.linalg.inv(nngp_precision(f, t.sigma2).toarray())[np.ix_(inv, inv)]
    np.testing.assert_allclose(quiet.cov, Ct, rtol=1e-8, atol=1e-10)


def test_reference_with_full_graph_is_exact_gp():
    ds, _, t = _ref_problem(n=25)
    g = build_neighbor_graph(ds.coords, 24)
    ref = reference_posterior(ds, g, t)
    C = dense_exp_cov(ds.coords, t.phi, t.sigma2)
    expect = C - C @ np.linalg.solve(C + t.tau2 * np.eye(25), C)
    np.testing.assert_allclose(ref.cov, expect, atol=1e-8)


def test_reference_size_limit():
    big = SpatialDataset(np.zeros((DENSE_MAX_N + 1, 2)), np.ones((DENSE_MAX_N + 1, 1)), np.zeros(DENSE_MAX_N + 1))
    with pytest.raises(ValueError, match="subsample"):
        reference_posterior(big, None, Truth(np.ones(1), 1.0, 1.0, 1.0))


# --- KL -----------------------------------------------------------------------


def test_kl_of_reference_with_itself_is_zero(rng):
    S = random_spd(rng, 20)
    ref = ReferencePosterior(rng.standard_normal(20), S)
    assert kl_gaussian(ref.mean, S, ref) == pytest.approx(0.0, abs=1e-10)
    D = np.diag(np.diag(S))
    diag_ref = ReferencePosterior(ref.mean, D)
    assert kl_gaussian(ref.mean, np.diag(S), diag_ref) == pytest.approx(0.0, abs=1e-10)


def test_kl_one_dimensional_unit_shift():
    ref = ReferencePosterior(np.array([1.0]), np.eye(1))
    assert kl_gaussian(np.zeros(1), np.ones(1), ref) == pytest.approx(0.5, rel=1e-14)
    assert kl_gaussian(np.zeros(1), np.eye(1), ref) == pytest.approx(0.5, rel=1e-14)


@given(seed=st.integers(0, 10_000))
def test_kl_matches_dense_formula(seed):
    r = np.random.default_rng(seed)
    S0, S1 = random_spd(r, 40), random_spd(r, 40)
    m0, m1 = r.standard_normal(40), r.standard_normal(40)
    ref = ReferencePosterior(m1, S1)
    expect = dense_kl(m0, S0, m1, S1)
    assert kl_gaussian(m0, S0, ref) == pytest.approx(expect, rel=1e-10, abs=1e-10)
    v = np.diag(S0)
    assert kl_gaussian(m0, v, ref) == pytest.approx(dense_kl(m0, np.diag(v), m1, S1), rel=1e-10)
    assert kl_gaussian(m0, S0, ref) >= 0


def test_kl_accepts_nngp_summary(rng):
    n = 15
    nbr = np.full((n, 2), -1)
    for i in range(1, n):
        nbr[i, 0] = i - 1
    a = np.where(nbr >= 0, 0.4, 0.0)
    gamma = rng.normal(-0.5, 0.2, n)
    order = rng.permutation(n)
    summ = GaussianSummary(rng.standard_normal(n), np.ones(n), "nngp", order=order, gamma=gamma, a=a, nbr=nbr)
    S = summ.dense_cov()
    ref = ReferencePosterior(np.zeros(n), random_spd(rng, n))
    assert kl_gaussian(summ.mean, summ, ref) == pytest.approx(dense_kl(summ.mean, S, ref.mean, ref.cov), rel=1e-9)


def test_kl_rejects_indefinite(rng):
    ref = ReferencePosterior(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        kl_gaussian(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), ref)
    with pytest.raises(ValueError):
        kl_gaussian(np.zeros(2), np.array([1.0, -1.0]), ref)


# --- CRPS ---------------------------------------------------------------------


def test_crps_hand_values():
    assert crps_samples(np.array([0.0, 2.0]), 1.0) == pytest.approx(0.5)
    assert crps_samples(np.full(10, 3.3), 3.3) == 0.0


def test_crps_matches_gaussian_closed_form(rng):
    draws = rng.normal(1.0, 2.0, 10_000)
    for x in (-2.0, 1.0, 4.5):
        assert crps_samples(draws, x) == pytest.approx(gaussian_crps(1.0, 2.0, x), rel=0.02)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(-100, 100), st.integers(0, 999))
def test_crps_permutation_invariant_and_matches_pairwise(draws, x, seed):
    d = np.array(draws)
    perm = np.random.default_rng(seed).permutation(d.size)
    a = crps_samples(d, x)
    assert crps_samples(d[perm], x) == pytest.approx(a, abs=1e-9)
    pairwise = np.mean(np.abs(d - x)) - 0.5 * np.mean(np.abs(d[:, None] - d[None, :]))
    assert a == pytest.approx(pairwise, abs=1e-9)
    assert a >= -1e-9


def test_crps_vectorised_over_locations(rng):
    D = rng.standard_normal((50, 4))
    x = rng.standard_normal(4)
    out = crps_samples(D, x)
    np.testing.assert_allclose(out, [crps_samples(D[:, j], x[j]) for j in range(4)], rtol=1e-12)
    with pytest.raises(ValueError):
        crps_samples(np.array([1.0]), 1.0)


# --- interval score and coverage ----------------------------------------------------


def test_interval_score_hand_values():
    assert interval_score_95(0.0, 1.0, 1.1) == pytest.approx(5.0)
    assert interval_score_95(0.0, 1.0, 0.5) == 1.0
    assert interval_score_95(0.0, 1.0, -0.5) == pytest.approx(21.0)
    with pytest.raises(ValueError, match="crossed"):
        interval_score_95(1.0, 0.0, 0.5)


def test_interval_score_double_coded(rng):
    lo = rng.normal(0, 1, 1000)
    hi = lo + rng.exponential(1, 1000)
    x = rng.normal(0, 2, 1000)
    ref = [(u - l) + 40 * max(l - t, 0) + 40 * max(t - u, 0) for l, u, t in zip(lo, hi, x)]
    np.testing.assert_allclose(interval_score_95(lo, hi, x), ref, rtol=1e-12)


def test_coverage_cases(rng):
    lo, hi = np.zeros(5), np.ones(5)
    assert coverage_95(lo, hi, np.full(5, 0.5)) == 1.0
    assert coverage_95(lo, hi, np.full(5, 2.0)) == 0.0
    with pytest.raises(ValueError):
        coverage_95(lo, hi, np.zeros(4))
    mu, sd = rng.normal(size=10_000), rng.uniform(0.5, 2, 10_000)
    l, u = gaussian_intervals(mu, sd**2)
    assert coverage_95(l, u, rng.normal(mu, sd)) == pytest.approx(0.95, abs=0.01)


def test_w_metrics_perfect_summary():
    w = np.linspace(-1, 1, 20)
    m = w_metrics(GaussianSummary(w, np.full(20, 1e-4), "diag"), w)
    assert m["coverage"] == 1.0 and m["mse"] == 0.0
    assert m["crps"] < 0.01
