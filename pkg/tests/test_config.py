import math

import numpy as np
import pytest

from spvb.config import (
    ConfigError,
    FitConfig,
    PriorSpec,
    default_config,
    default_phi_bounds,
    default_prior,
    split_settings,
)
from spvb.spatial import pairwise_distances


def test_phi_bounds_two_points_at_distance_ten():
    lo, hi = default_phi_bounds(np.array([[0.0, 0.0], [10.0, 0.0]]))
    assert (lo, hi) == pytest.approx((0.3, 3.0))


def test_phi_bounds_unit_square_corners():
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    lo, hi = default_phi_bounds(corners)
    assert lo == pytest.approx(3 / math.sqrt(2)) and hi == pytest.approx(30 / math.sqrt(2))


def test_phi_bounds_match_pairwise_scan(rng):
    pts = rng.uniform(0, 4, (200, 2))
    dmax = pairwise_distances(pts).max()
    assert default_phi_bounds(pts) == pytest.approx((3 / dmax, 30 / dmax), rel=1e-14)


def test_phi_bounds_need_spread():
    with pytest.raises(ConfigError):
        default_phi_bounds(np.zeros((1, 2)))
    with pytest.raises(ConfigError):
        default_phi_bounds(np.ones((3, 2)))


def test_default_settings():
    cfg = default_config()
    assert (cfg.m, cfg.m_q) == (15, 3)
    assert (cfg.adadelta_rate, cfg.adadelta_noise) == (0.85, 1e-6)
    assert (cfg.stop_window, cfg.stop_patience) == (50, 10)
    assert cfg.n_mc == 30
    assert default_config(method="mfa").max_epochs == 1000
    assert default_config(method="nngp").max_epochs == 1500
    p = default_prior(np.array([[0.0, 0.0], [10.0, 0.0]]))
    assert (p.a_tau, p.b_tau, p.a_sigma, p.b_sigma) == (1.0, 1.0, 1.0, 1.0)


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"m_q": 0}, "m_q"),
        ({"m": 2, "m_q": 3}, "m must be"),
        ({"n_mc": 0}, "n_mc"),
        ({"max_epochs": 0}, "max_epochs"),
        ({"batch_size": -1}, "batch_size"),
        ({"adadelta_rate": 1.0}, "adadelta_rate"),
        ({"adadelta_rate": 0.0}, "adadelta_rate"),
        ({"adadelta_noise": 0.0}, "adadelta_noise"),
        ({"stop_window": 0}, "stop_window"),
        ({"stop_patience": -1}, "stop_patience"),
        ({"phi_grad_step": 0.0}, "phi_grad_step"),
        ({"ordering": "random"}, "ordering"),
    ],
)
def test_config_rejects_each_violation(kw, field):
    with pytest.raises(ConfigError, match=field):
        FitConfig(**kw)


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"a_tau": 0.0}, "a_tau"),
        ({"b_tau": -1.0}, "b_tau"),
        ({"a_sigma": np.nan}, "a_sigma"),
        ({"b_sigma": 0.0}, "b_sigma"),
        ({"phi_min": 0.0}, "phi_min"),
        ({"phi_min": 2.0, "phi_max": 1.0}, "phi_max"),
    ],
)
def test_prior_rejects_each_violation(kw, field):
    with pytest.raises(ConfigError, match=field):
        PriorSpec(**kw)


def test_split_settings_partitions_keys():
    prior, cfg, rest = split_settings({"a_tau": 2.0, "m": 10, "response": "z"})
    assert prior == {"a_tau": 2.0} and cfg == {"m": 10} and rest == {"response": "z"}


def test_round_trip_dicts():
    cfg = FitConfig(m=9, rng_seed=4)
    assert FitConfig(**cfg.to_dict()) == cfg
    pr = PriorSpec(a_tau=2.0)
    assert PriorSpec(**pr.to_dict()) == pr
