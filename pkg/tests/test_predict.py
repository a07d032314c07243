from dataclasses import replace

import numpy as np
import pytest

from spvb.config import FitConfig
from spvb.conjugate import InverseGammaPosterior
from spvb.experiments import prediction_replicate
from spvb.mfa import fit_spvb_mfa
from spvb.nngp_vi import fit_spvb_nngp, fit_spvb_nngp_joint
from spvb.predict import new_site_factors, predict
from spvb.spatial import SpatialError

# an inverse gamma this tight is a point mass for every practical purpose
TIGHT = 1e8


def point_mass(v):
    return InverseGammaPosterior(TIGHT + 1, v * TIGHT)


@pytest.fixture(scope="module")
def mfa_fit(sim100):
    ds, _ = sim100
    return fit_spvb_mfa(ds, config=FitConfig(rng_seed=3, max_epochs=300))


@pytest.fixture(scope="module")
def nngp_fit(sim100):
    ds, _ = sim100
    return fit_spvb_nngp(ds, config=FitConfig(rng_seed=3, max_epochs=150))


def test_new_site_factors_coincident_and_far():
    obs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    s = new_site_factors(obs, np.array([[1.0, 0.0], [1e4, 1e4]]), 2, 1.0)
    assert s.nbr[0, 0] == 1
    np.testing.assert_allclose(s.b[0], [1.0, 0.0], atol=1e-12)
    assert s.F[0] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(s.b[1], 0.0, atol=1e-300)
    assert s.F[1] == 1.0
    with pytest.raises(SpatialError):
        new_site_factors(np.zeros((0, 2)), np.zeros((1, 2)), 3, 1.0)


def test_coincident_site_with_vanishing_noise_returns_posterior_mean(mfa_fit):
    fit = replace(mfa_fit, q_tau=point_mass(1e-12))
    idx = [4, 17, 60]
    d = predict(fit, fit.dataset.coords[idx], fit.dataset.X[idx], n_samples=20_000, seed=1)
    se = np.sqrt(fit.w.var[idx] / 20_000)
    assert np.all(np.abs(d.w_summary()["mean"] - fit.w.mean[idx]) < 4 * se)
    np.testing.assert_allclose(d.w_summary()["var"], fit.w.var[idx], rtol=0.05)
    # with no noise and a coincident site, y minus the fixed effect is w itself
    np.testing.assert_allclose(d.y_draws - d.beta_draws @ fit.dataset.X[idx].T, d.w_draws, atol=1e-5)


def test_far_site_is_marginal_prior(nngp_fit):
    fit = replace(nngp_fit, q_sigma=point_mass(10.0))
    d = predict(fit, np.array([[1e5, 1e5]]), np.array([[1.0, 1.0]]), n_samples=20_000, seed=2)
    w = d.w_draws[:, 0]
    assert abs(w.mean()) < 4 * np.sqrt(10.0 / 20_000)
    assert w.var() == pytest.approx(10.0, rel=0.05)


@pytest.mark.parametrize("which", ["mfa", "nngp"])
def test_drawwise_decomposition(which, mfa_fit, nngp_fit, rng):
    fit = mfa_fit if which == "mfa" else nngp_fit
    X0 = rng.standard_normal((7, 2))
    d = predict(fit, rng.uniform(0, 10, (7, 2)), X0, n_samples=450, seed=3)
    np.testing.assert_allclose(d.y_draws, d.beta_draws @ X0.T + d.w_draws + d.noise_draws, rtol=0, atol=1e-12)
    assert d.y_draws.shape == (450, 7) and d.tau2_draws.shape == (450,)


def test_joint_fit_prediction(sim100, rng):
    ds, _ = sim100
    fit = fit_spvb_nngp_joint(ds, config=FitConfig(rng_seed=3, max_epochs=60))
    X0 = rng.standard_normal((3, 2))
    d = predict(fit, rng.uniform(0, 10, (3, 2)), X0, n_samples=300)
    np.testing.assert_allclose(d.y_draws, d.beta_draws @ X0.T + d.w_draws + d.noise_draws, atol=1e-12)


def test_seeded_determinism(nngp_fit):
    c, X = np.array([[2.0, 3.0], [7.5, 1.0]]), np.ones((2, 2))
    a = predict(nngp_fit, c, X, n_samples=300, seed=9)
    b = predict(nngp_fit, c, X, n_samples=300, seed=9)
    other = predict(nngp_fit, c, X, n_samples=300, seed=10)
    np.testing.assert_array_equal(a.y_draws, b.y_draws)
    assert not np.array_equal(a.y_draws, other.y_draws)
    # the default seed is the fit seed
    np.testing.assert_array_equal(predict(nngp_fit, c, X, n_samples=300).y_draws,
                                  predict(nngp_fit, c, X, n_samples=300, seed=3).y_draws)


def test_monte_carlo_error_shrinks_with_draws(mfa_fit):
    """Doubling the draws halves the variance of the predictive mean (the SE shrinks by sqrt 2)."""
    c, X = np.array([[5.0, 5.0]]), np.array([[0.5, -0.5]])
    means = {S: np.array([predict(mfa_fit, c, X, n_samples=S, seed=s).y_summary()["mean"][0]
                          for s in range(60)]) for S in (200, 400)}
    ratio = np.var(means[200], ddof=1) / np.var(means[400], ddof=1)
    # F(59, 59) has its central 99.7% within about [0.46, 2.2] around 1, so scale by 2
    assert 2 / 3 < ratio < 3 * 2


def test_summaries_are_type7_quantiles(nngp_fit):
    d = predict(nngp_fit, np.array([[1.0, 1.0]]), np.ones((1, 2)), n_samples=101, seed=4)
    s = d.y_summary()
    col = np.sort(d.y_draws[:, 0])
    # with 101 draws type-7 quantiles land exactly on order statistics
    assert s["q500"][0] == col[50]
    assert s["q025"][0] == pytest.approx(col[2] + 0.5 * (col[3] - col[2]))
    assert s["var"][0] == pytest.approx(np.var(col, ddof=1))


def test_input_validation(nngp_fit):
    with pytest.raises(ValueError, match="p=2"):
        predict(nngp_fit, np.zeros((1, 2)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        predict(nngp_fit, np.zeros((2, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        predict(nngp_fit, np.zeros((1, 2)), np.zeros((1, 2)), n_samples=1)


def test_holdout_coverage_one_replicate():
    out = prediction_replicate(seed=1, methods=("mfa",))
    assert 0.85 <= out["mfa"]["coverage"] <= 1.0
    assert out["mfa"]["crps"] > 0
