import numpy as np
import pytest

from spvb.experiments import fit_method, mean_or_nan, trailing_average_monotone
from spvb.problem import prepare


def test_trailing_average_monotone_cases():
    assert trailing_average_monotone([1, 2, 3, 3, 2, 1])["monotone"]
    res = trailing_average_monotone([1, 3, 2, 4, 1])
    assert res == {"monotone": False, "decreases": 1, "checked": 4, "max_drop": 1.0, "rise": 3.0}
    assert trailing_average_monotone([5.0])["monotone"]
    assert trailing_average_monotone([1, 0.999, 2], tol=0.01)["monotone"]


def test_mean_or_nan():
    assert mean_or_nan([1.0, None, 3.0]) == 2.0
    assert np.isnan(mean_or_nan([None]))


def test_fit_method_dispatch(sim100):
    prob = prepare(sim100[0])
    with pytest.raises(ValueError, match="unknown method"):
        fit_method("mcmc", prob)
