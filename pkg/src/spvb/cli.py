"""Command-line interface: ``spvb fit | predict | simulate | evaluate | reproduce``.

Settings resolve as built-in defaults, then the TOML file given by
``--config``, then explicit flags. Every file written is a pure function of
the inputs, the settings and the seed, except ``timings.json``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from spvb import __version__
from spvb.config import ConfigError, FitConfig, PriorSpec, default_config, default_prior, split_settings
from spvb.conjugate import RankDeficientError
from spvb.io import (
    DEFAULT_RESPONSE,
    InputError,
    dump_json,
    file_digest,
    load_json,
    read_dataset,
    read_settings,
    read_table,
    write_csv,
)
from spvb.spatial import SpatialDataset, SpatialError

METHODS = ("nngp", "nngp-joint", "mfa", "mfa-lr")
EXPERIMENTS = ("variance", "kl", "coverage", "prediction", "elbo", "scaling")
USER_ERRORS = (InputError, ConfigError, SpatialError, RankDeficientError, ValueError)

_FLAG_TO_FIELD = {
    "m": "m",
    "mq": "m_q",
    "n_mc": "n_mc",
    "epochs": "max_epochs",
    "batch_size": "batch_size",
    "seed": "rng_seed",
}


# ---------------------------------------------------------------------------
# Threads
# ---------------------------------------------------------------------------


def resolve_threads(flag: int | None) -> int:
    """``--threads``, else ``SPVB_THREADS``, else every core."""
    if flag is not None:
        n = flag
    elif os.environ.get("SPVB_THREADS"):
        try:
            n = int(os.environ["SPVB_THREADS"])
        except ValueError:
            raise ConfigError(f"SPVB_THREADS must be an integer, got {os.environ['SPVB_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError(f"thread count must be at least 1, got {n}")
    return n


def apply_threads(n: int) -> None:
    """Size the numba pool; BLAS is pinned to one thread by the caller."""
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


def resolve_settings(args, coords, method: str) -> tuple[PriorSpec, FitConfig, dict]:
    """Defaults < config file < flags. Returns prior, config and extra keys."""
    file_settings = read_settings(args.config) if args.config else {}
    prior_kw, cfg_kw, rest = split_settings(file_settings)
    unknown = sorted(set(rest) - {"response", "method", "covariates"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for flag, name in _FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg_kw[name] = v
    if args.phi_min is not None:
        prior_kw["phi_min"] = args.phi_min
    if args.phi_max is not None:
        prior_kw["phi_max"] = args.phi_max
    base_cfg = default_config(method=method)
    try:
        cfg = base_cfg.with_(**cfg_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    base_prior = default_prior(coords) if coords.shape[0] > 1 else PriorSpec()
    prior = PriorSpec(**{**base_prior.to_dict(), **prior_kw})
    return prior, cfg, rest


def _check_method(method: str) -> str:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return method


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _w_summary_columns(fit):
    from spvb.evaluation import gaussian_intervals

    lo, hi = gaussian_intervals(fit.w.mean, fit.w.var)
    idx = fit.kept if fit.kept is not None else np.arange(fit.w.n)
    coords = fit.dataset.coords
    return ["index", "x", "y", "mean", "var", "lower", "upper"], [
        idx, coords[:, 0], coords[:, 1], fit.w.mean, fit.w.var, lo, hi,
    ]


def fit_summary(fit, covariates) -> dict:
    ci = fit.beta_intervals()
    return {
        "method": fit.method,
        "n": fit.dataset.n,
        "beta": {
            name: {"mean": fit.beta.mu_beta[j], "sd": float(np.sqrt(fit.beta.V_beta[j, j])),
                   "lower": ci[j, 0], "upper": ci[j, 1]}
            for j, name in enumerate(covariates)
        },
        "beta_cov": fit.beta.V_beta,
        "tau2": {"shape": fit.q_tau.shape, "scale": fit.q_tau.scale, "mean": fit.q_tau.mean},
        "sigma2": {"shape": fit.q_sigma.shape, "scale": fit.q_sigma.scale, "mean": fit.q_sigma.mean},
        "phi": fit.phi,
        "epochs": fit.epochs,
        "converged": fit.converged,
        "dropped": np.asarray(fit.extras.get("dropped", []), dtype=np.int64),
    }


def cmd_fit(args) -> int:
    from spvb.experiments import FITTERS
    from spvb.persist import fit_to_dict

    settings = read_settings(args.config) if args.config else {}
    method = _check_method(args.method or settings.get("method") or "nngp")
    response = args.response or settings.get("response", DEFAULT_RESPONSE)
    covariates = settings.get("covariates")
    coords, X, y, covariates = read_dataset(args.data, response, covariates)
    prior, cfg, _ = resolve_settings(args, coords, method)
    dataset = SpatialDataset(coords, X, y)
    kw = {"full": True} if (method == "mfa-lr" and args.full_cov) else {}
    fit = FITTERS[method](dataset, prior=prior, config=cfg, **kw)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(fit_summary(fit, covariates), out / "summary.json")
    header, cols = _w_summary_columns(fit)
    write_csv(out / "w_summary.csv", header, cols)
    trace = np.asarray(fit.elbo_trace, dtype=float)
    write_csv(out / "elbo_trace.csv", ["epoch", "elbo"], [np.arange(1, trace.size + 1), trace])
    dump_json(fit_to_dict(fit, covariates), out / "fit_state.json")
    manifest = {
        "software": "spvb",
        "version": __version__,
        "command": "fit",
        "method": method,
        "seed": cfg.rng_seed,
        "response": response,
        "covariates": covariates,
        "prior": prior.to_dict(),
        "config": cfg.to_dict(),
        "inputs": {"data": {"path": Path(args.data).name, "sha256": file_digest(args.data)}},
    }
    if args.config:
        manifest["inputs"]["config"] = {"path": Path(args.config).name, "sha256": file_digest(args.config)}
    dump_json(manifest, out / "manifest.json")
    dump_json({k: float(v) for k, v in fit.timings.items()}, out / "timings.json")
    _say(args, f"{method}: {fit.epochs} epochs, converged={fit.converged}; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _load_fit(fit_dir):
    from spvb.persist import fit_from_dict

    path = Path(fit_dir) / "fit_state.json"
    if not path.is_file():
        raise InputError(f"no fit_state.json in {fit_dir}")
    d = load_json(path)
    return fit_from_dict(d), d.get("covariates")


def cmd_predict(args) -> int:
    from spvb.predict import predict

    fit, covariates = _load_fit(args.fit)
    header, M = read_table(args.data)
    for c in ("x", "y"):
        if c not in header:
            raise InputError(f"{args.data}: missing coordinate column '{c}'")
    col = {c: i for i, c in enumerate(header)}
    if covariates is not None:
        absent = [c for c in covariates if c not in col]
        if absent:
            raise InputError(
                f"{args.data}: missing covariate column(s) {', '.join(absent)} required by the fit"
            )
        names = covariates
    else:
        names = [c for c in header if c not in ("x", "y", "index", DEFAULT_RESPONSE)]
    X = M[:, [col[c] for c in names]]
    p = fit.beta.mu_beta.shape[0]
    if X.shape[1] != p:
        raise InputError(f"{args.data}: {X.shape[1]} covariates, the fit has p={p}")
    coords = M[:, [col["x"], col["y"]]]
    seed = fit.config.rng_seed if args.seed is None else args.seed
    draws = predict(fit, coords, X, n_samples=args.n_samples, seed=seed)
    ys, ws = draws.y_summary(), draws.w_summary()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    idx = M[:, col["index"]].astype(np.int64) if "index" in col else np.arange(M.shape[0])
    write_csv(
        out / "predictions.csv",
        ["index", "x", "y", "y_mean", "y_var", "y_q025", "y_q975", "w_mean", "w_var", "w_q025", "w_q975"],
        [idx, coords[:, 0], coords[:, 1], ys["mean"], ys["var"], ys["q025"], ys["q975"],
         ws["mean"], ws["var"], ws["q025"], ws["q975"]],
    )
    dump_json(
        {
            "software": "spvb", "version": __version__, "command": "predict", "seed": seed,
            "n_samples": args.n_samples,
            "inputs": {
                "fit_state": file_digest(Path(args.fit) / "fit_state.json"),
                "data": {"path": Path(args.data).name, "sha256": file_digest(args.data)},
            },
        },
        out / "manifest.json",
    )
    _say(args, f"predicted {M.shape[0]} locations; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from spvb.evaluation import SimSpec, simulate

    beta = tuple(float(b) for b in args.beta.split(","))
    spec = SimSpec(
        n=args.n, domain_side=args.side, beta_true=beta, tau2_true=args.tau2,
        sigma2_true=args.sigma2, phi_true=args.phi, m_gen=args.m_gen, seed=args.seed,
    )
    ds, w = simulate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    xnames = [f"x{j + 1}" for j in range(ds.p)]
    write_csv(
        out / "data.csv",
        ["index", "x", "y", *xnames, DEFAULT_RESPONSE],
        [np.arange(ds.n), ds.coords[:, 0], ds.coords[:, 1], *ds.X.T, ds.y],
    )
    write_csv(out / "w_true.csv", ["index", "w"], [np.arange(ds.n), w])
    dump_json(
        {
            "n": spec.n, "domain_side": spec.domain_side, "beta": list(spec.beta_true),
            "tau2": spec.tau2_true, "sigma2": spec.sigma2_true, "phi": spec.phi_true,
            "m_gen": spec.m_gen, "seed": spec.seed, "covariates": xnames,
        },
        out / "truth.json",
    )
    _say(args, f"simulated n={ds.n}; outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _load_truth(truth_dir):
    from spvb.evaluation import Truth

    d = Path(truth_dir)
    tpath, wpath = d / "truth.json", d / "w_true.csv"
    for p in (tpath, wpath):
        if not p.is_file():
            raise InputError(f"truth file not found: {p}")
    t = load_json(tpath)
    header, M = read_table(wpath)
    if "w" not in header:
        raise InputError(f"{wpath}: missing column 'w'")
    w = M[:, header.index("w")]
    return Truth(np.asarray(t["beta"], float), float(t["tau2"]), float(t["sigma2"]), float(t["phi"])), w, t


def _summary_for_kl(fit):
    """A w-summary with its full covariance available (refits LR densely)."""
    if fit.method == "mfa-lr":
        from spvb.linear_response import fit_spvb_mfa_lr

        fixed = fit.extras.get("fixed")
        if not fixed:
            raise InputError("linear-response fit state lacks its plug-in values")
        return fit_spvb_mfa_lr(fit.dataset, fit.prior, fit.config, fixed=fixed, full=True).w
    return fit.w


def evaluate_one(fit, truth, w_true, m_ref: int) -> tuple[dict, dict]:
    """Metrics for one fit plus plot data against the exact reference."""
    from spvb.evaluation import DENSE_MAX_N, kl_gaussian, reference_posterior, w_metrics
    from spvb.spatial import build_neighbor_graph

    if fit.kept is not None:
        w_true = w_true[fit.kept]
    if w_true.shape[0] != fit.w.n:
        raise InputError(f"w_true has {w_true.shape[0]} rows, the fit has {fit.w.n} locations")
    if truth.beta.shape[0] != fit.beta.mu_beta.shape[0]:
        raise InputError("truth and fit disagree on the number of coefficients")
    row = {"method": fit.method, "n": fit.w.n}
    row.update(w_metrics(fit.w, w_true, seed=fit.config.rng_seed))
    ci = fit.beta_intervals()
    for j, b in enumerate(truth.beta):
        row[f"beta{j + 1}_covered"] = float(ci[j, 0] <= b <= ci[j, 1])
    plot = None
    if fit.w.n <= DENSE_MAX_N:
        ds = fit.dataset
        ref = reference_posterior(ds, build_neighbor_graph(ds.coords, min(m_ref, max(ds.n - 1, 1))), truth)
        summary = _summary_for_kl(fit)
        row["kl_per_n"] = kl_gaussian(summary.mean, summary, ref) / fit.w.n
        plot = {"vi_mean": fit.w.mean, "ref_mean": ref.mean, "vi_var": fit.w.var, "ref_var": ref.var}
    else:
        row["kl_per_n"] = float("nan")
    return row, plot


METRIC_COLUMNS = ("kl_per_n", "coverage", "interval_score", "crps", "mse")


def _finite_mean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("nan")


def cmd_evaluate(args) -> int:
    if len(args.fit) != len(args.truth):
        raise InputError("give one --truth directory per --fit directory")
    out = Path(args.out)
    rows = []
    for k, (fdir, tdir) in enumerate(zip(args.fit, args.truth)):
        truth, w_true, meta = _load_truth(tdir)
        fit, _ = _load_fit(fdir)
        row, plot = evaluate_one(fit, truth, w_true, int(meta.get("m_gen", 15)))
        row = {"replicate": k, **row}
        rows.append(row)
        if plot is not None:
            out.mkdir(parents=True, exist_ok=True)
            idx = fit.kept if fit.kept is not None else np.arange(fit.w.n)
            write_csv(out / f"scatter_{k}.csv", ["index", *plot], [idx, *plot.values()])
    out.mkdir(parents=True, exist_ok=True)
    beta_cols = sorted({c for r in rows for c in r if c.startswith("beta")})
    header = ["replicate", "method", "n", *METRIC_COLUMNS, *beta_cols]
    write_csv(out / "metrics.csv", header,
              [np.array([r.get(c, np.nan) for r in rows], dtype=object) for c in header])
    agg = {"replicates": len(rows), "by_method": {}}
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        agg["by_method"][method] = {c: _finite_mean([r.get(c, np.nan) for r in sel])
                                    for c in (*METRIC_COLUMNS, *beta_cols)}
    dump_json(agg, out / "aggregate.json")
    _say(args, f"evaluated {len(rows)} fit(s); outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------


def cmd_reproduce(args) -> int:
    from spvb import experiments as ex

    seeds = range(args.first_seed, args.first_seed + args.replicates)
    runners = {
        "variance": lambda s: ex.variance_ordering(s, n=args.n or 500),
        "kl": lambda s: ex.kl_replicate(s, n=args.n or 1000),
        "coverage": lambda s: ex.coverage_replicate(s, n=args.n or 1000),
        "prediction": lambda s: ex.prediction_replicate(s, n_train=args.n or 1000),
        "elbo": lambda s: ex.elbo_replicate(s, n=args.n or 500),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.experiment == "scaling":
        result = ex.scaling()
        result = {"per_epoch": {str(k): v for k, v in result["per_epoch"].items()}, "ratios": result["ratios"]}
        dump_json(result, out / "scaling.json")
        _say(args, f"scaling ratios: {', '.join(f'{r:.3f}' for r in result['ratios'])}")
        return 0
    results = []
    for s in seeds:
        results.append(runners[args.experiment](s))
        _say(args, f"{args.experiment} seed {s} done")
    dump_json({"experiment": args.experiment, "replicates": results}, out / f"{args.experiment}.json")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spvb", description="Variational Bayes for NNGP spatial regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: SPVB_THREADS, else all cores)")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    f = sub.add_parser("fit", parents=[common], help="fit a model to a CSV dataset")
    f.add_argument("--method", choices=METHODS, default=None, help="default: nngp")
    f.add_argument("--data", required=True)
    f.add_argument("--config", default=None, help="TOML file of prior/config fields")
    f.add_argument("--out", required=True)
    f.add_argument("--response", default=None, help=f"response column (default: {DEFAULT_RESPONSE})")
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--batch-size", type=int, default=None)
    f.add_argument("--m", type=int, default=None)
    f.add_argument("--mq", type=int, default=None)
    f.add_argument("--n-mc", type=int, default=None)
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--phi-min", type=float, default=None)
    f.add_argument("--phi-max", type=float, default=None)
    f.add_argument("--full-cov", action="store_true",
                   help="mfa-lr only: keep the dense corrected covariance")
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict at new locations from a fit directory")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True, help="CSV with x, y and the fit's covariates")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=None, help="default: the fit's seed")
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset from the benchmark design")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=_positive_int, default=1000)
    s.add_argument("--side", type=float, default=10.0)
    s.add_argument("--beta", default="2,5", help="comma-separated coefficients")
    s.add_argument("--tau2", type=float, default=0.5)
    s.add_argument("--sigma2", type=float, default=10.0)
    s.add_argument("--phi", type=float, default=1.0)
    s.add_argument("--m-gen", type=_positive_int, default=15)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", parents=[common], help="score fits against simulation truth")
    e.add_argument("--fit", action="append", required=True, help="fit directory (repeatable)")
    e.add_argument("--truth", action="append", required=True, help="simulate output directory (repeatable)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reproduce", parents=[common], help="run a simulation study")
    r.add_argument("experiment", choices=EXPERIMENTS)
    r.add_argument("--out", required=True)
    r.add_argument("--replicates", type=_positive_int, default=10)
    r.add_argument("--first-seed", type=int, default=1)
    r.add_argument("--n", type=_positive_int, default=None, help="sample size override")
    r.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from threadpoolctl import threadpool_limits

    try:
        apply_threads(resolve_threads(args.threads))
        # one BLAS thread keeps dense reductions in a fixed order
        with threadpool_limits(limits=1, user_api="blas"):
            return args.func(args)
    except USER_ERRORS as exc:
        print(f"spvb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
