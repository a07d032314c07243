"""Replicate runners for the simulation studies.

Each function runs one replicate (or one sweep) and returns plain numbers,
so the CLI ``reproduce`` command, the scripts and the acceptance suite all
share the same code path.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from spvb.config import FitConfig
from spvb.evaluation import (
    SimSpec,
    coverage_95,
    crps_samples,
    kl_gaussian,
    reference_posterior,
    simulate,
    truth_of,
)
from spvb.linear_response import fit_spvb_mfa_lr
from spvb.mfa import fit_spvb_mfa
from spvb.nngp_vi import fit_spvb_nngp, fit_spvb_nngp_joint
from spvb.predict import predict
from spvb.problem import Problem, prepare
from spvb.spatial import build_neighbor_graph

FITTERS = {
    "nngp": fit_spvb_nngp,
    "nngp-joint": fit_spvb_nngp_joint,
    "mfa": fit_spvb_mfa,
    "mfa-lr": fit_spvb_mfa_lr,
}
MFA_EPOCHS = 1000


def fit_method(method: str, problem: Problem, **kw):
    """Run ``method`` on a prepared problem; mean-field defaults to 1000 epochs."""
    if method not in FITTERS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(FITTERS)}")
    if method == "mfa" and problem.config.max_epochs == FitConfig().max_epochs:
        problem = replace(problem, config=problem.config.with_(max_epochs=MFA_EPOCHS))
    return FITTERS[method](problem.dataset, problem=problem, **kw)


def _reference_for(fit, dataset, truth, m):
    if fit.kept is not None and fit.kept.size < dataset.n:
        dataset = dataset.take(fit.kept)
    return reference_posterior(dataset, build_neighbor_graph(dataset.coords, min(m, dataset.n - 1)), truth)


def variance_ordering(seed: int, n: int = 500) -> dict:
    """Mean-field and corrected w-variances against the exact posterior at the truth."""
    spec = SimSpec(n=n, seed=seed)
    ds, _ = simulate(spec)
    truth = truth_of(spec)
    fixed = {"tau2": truth.tau2, "sigma2": truth.sigma2, "phi": truth.phi}
    problem = prepare(ds, config=FitConfig(rng_seed=seed))
    mfa = fit_method("mfa", problem, fixed=fixed)
    lr = fit_method("mfa-lr", problem, fixed=fixed)
    ref = _reference_for(mfa, ds, truth, problem.config.m)
    ref_lr = _reference_for(lr, ds, truth, problem.config.m)
    rel = np.abs(lr.w.var - ref_lr.var) / ref_lr.var
    return {
        "seed": seed,
        "frac_mfa_below": float(np.mean(mfa.w.var < ref.var)),
        "lr_median_rel_err": float(np.median(rel)),
        "lr_dropped": int(ds.n - lr.kept.size),
    }


def kl_replicate(seed: int, n: int = 1000, methods=("nngp", "mfa-lr", "mfa")) -> dict:
    """KL(q || exact posterior at the truth) / n for each method on one dataset."""
    spec = SimSpec(n=n, seed=seed)
    ds, _ = simulate(spec)
    truth = truth_of(spec)
    problem = prepare(ds, config=FitConfig(rng_seed=seed))
    out = {"seed": seed}
    ref_full = None
    for method in methods:
        kw = {"full": True} if method == "mfa-lr" else {}
        fit = fit_method(method, problem, **kw)
        if fit.kept is not None and fit.kept.size < ds.n:
            ref = _reference_for(fit, ds, truth, problem.config.m)
        else:
            if ref_full is None:
                ref_full = _reference_for(fit, ds, truth, problem.config.m)
            ref = ref_full
        out[method] = kl_gaussian(fit.w.mean, fit.w, ref) / fit.w.n
    return out


def coverage_replicate(seed: int, n: int = 1000, methods=tuple(FITTERS)) -> dict:
    """Whether each coefficient's 95% interval covers the truth, per method."""
    spec = SimSpec(n=n, seed=seed)
    ds, _ = simulate(spec)
    truth = truth_of(spec)
    problem = prepare(ds, config=FitConfig(rng_seed=seed))
    out = {"seed": seed}
    for method in methods:
        fit = fit_method(method, problem)
        ci = fit.beta_intervals()
        out[method] = [bool(lo <= b <= hi) for (lo, hi), b in zip(ci, truth.beta)]
        out[method + "_sd"] = np.sqrt(np.diag(fit.beta.V_beta)).tolist()
    return out


def prediction_replicate(seed: int, n_train: int = 1000, n_test: int = 100, methods=("nngp", "mfa")) -> dict:
    """Hold-out y coverage and CRPS for each method."""
    spec = SimSpec(n=n_train + n_test, seed=seed)
    ds, _ = simulate(spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
    test = np.sort(rng.choice(ds.n, n_test, replace=False))
    train = np.setdiff1d(np.arange(ds.n), test)
    problem = prepare(ds.take(train), config=FitConfig(rng_seed=seed))
    out = {"seed": seed}
    for method in methods:
        fit = fit_method(method, problem)
        draws = predict(fit, ds.coords[test], ds.X[test])
        s = draws.y_summary()
        out[method] = {
            "coverage": coverage_95(s["q025"], s["q975"], ds.y[test]),
            "crps": float(np.mean(crps_samples(draws.y_draws, ds.y[test]))),
        }
    return out


def trailing_average_monotone(averages, tol: float = 0.0) -> dict:
    """Decreases in a trailing-average stream before its final maximum.

    The stopping rule fires only after the average has failed to beat its
    maximum K+1 times in a row, so the stretch after the last maximum is
    the stopping signal itself and is excluded.
    """
    a = np.asarray(averages, dtype=float)
    if a.size < 2:
        return {"monotone": True, "decreases": 0, "checked": int(a.size), "max_drop": 0.0, "rise": 0.0}
    last_best = int(np.argmax(a))
    seg = a[: last_best + 1]
    diff = np.diff(seg)
    drops = np.flatnonzero(diff < -tol)
    return {
        "monotone": drops.size == 0,
        "decreases": int(drops.size),
        "checked": int(seg.size),
        "max_drop": float(max(-diff.min(), 0.0)) if diff.size else 0.0,
        "rise": float(seg[-1] - seg[0]),
    }


def elbo_replicate(seed: int, n: int = 500) -> dict:
    spec = SimSpec(n=n, seed=seed)
    ds, _ = simulate(spec)
    fit = fit_spvb_nngp(ds, config=FitConfig(rng_seed=seed))
    res = trailing_average_monotone(fit.extras["stop_averages"])
    res.update(seed=seed, epochs=fit.epochs, converged=fit.converged)
    return res


def epoch_time(n: int, epochs: int = 30, seed: int = 0) -> float:
    """Seconds per epoch of the independent NNGP fit, setup excluded."""
    ds, _ = simulate(SimSpec(n=n, seed=seed))
    cfg = FitConfig(rng_seed=seed, max_epochs=epochs, stop_window=max(epochs + 1, 50))
    fit = fit_spvb_nngp(ds, config=cfg)
    return fit.timings["per_epoch"]


def scaling(ns=(2000, 4000, 8000), epochs: int = 30, repeats: int = 3) -> dict:
    """Best-of-``repeats`` per-epoch time and the ratio per doubling."""
    epoch_time(500, epochs=3)  # compile and warm caches
    times = {}
    for n in ns:
        times[n] = min(epoch_time(n, epochs) for _ in range(repeats))
    ratios = [times[b] / times[a] for a, b in zip(ns[:-1], ns[1:])]
    return {"per_epoch": times, "ratios": ratios}


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def mean_or_nan(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else math.nan
