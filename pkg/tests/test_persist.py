import numpy as np
import pytest

from spvb.config import FitConfig
from spvb.io import dump_json, load_json
from spvb.linear_response import fit_spvb_mfa_lr
from spvb.mfa import fit_spvb_mfa
from spvb.nngp_vi import fit_spvb_nngp, fit_spvb_nngp_joint
from spvb.persist import fit_from_dict, fit_to_dict
from spvb.predict import predict

CFG = FitConfig(rng_seed=2, max_epochs=40)


@pytest.mark.parametrize(
    "fitter, kw",
    [(fit_spvb_nngp, {}), (fit_spvb_nngp_joint, {}), (fit_spvb_mfa, {}), (fit_spvb_mfa_lr, {})],
    ids=["nngp", "nngp-joint", "mfa", "mfa-lr"],
)
def test_round_trip_preserves_predictions(fitter, kw, sim100, tmp_path):
    ds, _ = sim100
    fit = fitter(ds, config=CFG, **kw)
    path = tmp_path / "state.json"
    dump_json(fit_to_dict(fit, ["x1", "x2"]), path)
    back = fit_from_dict(load_json(path))
    assert back.method == fit.method
    np.testing.assert_array_equal(back.w.mean, fit.w.mean)
    np.testing.assert_allclose(back.w.var, fit.w.var, rtol=1e-12)
    np.testing.assert_array_equal(back.beta.V_beta, fit.beta.V_beta)
    assert back.config == fit.config and back.prior == fit.prior
    c, X = np.array([[3.0, 4.0], [9.0, 0.5]]), np.ones((2, 2))
    a = predict(fit, c, X, n_samples=50, seed=1)
    b = predict(back, c, X, n_samples=50, seed=1)
    np.testing.assert_array_equal(a.y_draws, b.y_draws)


def test_unknown_format_rejected(sim100):
    d = fit_to_dict(fit_spvb_mfa(sim100[0], config=CFG))
    d["format"] = 99
    with pytest.raises(ValueError, match="format"):
        fit_from_dict(d)
