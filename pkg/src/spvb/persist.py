"""Round-trip a fit through plain JSON so prediction can run in a new process."""

from __future__ import annotations

import numpy as np

from spvb.config import FitConfig, PriorSpec
from spvb.conjugate import BetaPosterior, InverseGammaPosterior
from spvb.linear_response import LrInputs
from spvb.mfa import MfaVariational
from spvb.nngp_vi import JointVariational, NngpVariational, joint_summary, nngp_summary
from spvb.report import FitReport, GaussianSummary
from spvb.spatial import NeighborGraph, SpatialDataset

FORMAT_VERSION = 1


def _arr(v, dtype=float):
    return np.asarray(v, dtype=dtype)


def _state_dict(state) -> dict:
    if isinstance(state, JointVariational):
        return {
            "kind": "joint",
            "mu_beta": state.mu_beta, "eta": state.eta, "l_beta": state.l_beta,
            "gamma_beta": state.gamma_beta, "a_beta": state.a_beta,
            "a": state.a, "gamma": state.gamma, "nbr_q": state.nbr_q,
        }
    if isinstance(state, NngpVariational):
        return {"kind": "nngp", "eta": state.eta, "a": state.a, "gamma": state.gamma, "nbr_q": state.nbr_q}
    if isinstance(state, MfaVariational):
        return {"kind": "mfa", "mu_w": state.mu_w, "J": state.J}
    if isinstance(state, LrInputs):
        return {"kind": "lr"}
    raise TypeError(f"unsupported state type {type(state).__name__}")


def _state_from(d: dict):
    kind = d["kind"]
    if kind == "joint":
        return JointVariational(
            _arr(d["mu_beta"]), _arr(d["eta"]), _arr(d["l_beta"]), _arr(d["gamma_beta"]),
            _arr(d["a_beta"]), _arr(d["a"]), _arr(d["gamma"]), _arr(d["nbr_q"], np.int64),
        )
    if kind == "nngp":
        return NngpVariational(_arr(d["eta"]), _arr(d["a"]), _arr(d["gamma"]), _arr(d["nbr_q"], np.int64))
    if kind == "mfa":
        return MfaVariational(_arr(d["mu_w"]), _arr(d["J"]))
    return None


def fit_to_dict(fit: FitReport, covariates: list[str] | None = None) -> dict:
    """Everything ``predict`` needs, in JSON-ready form."""
    return {
        "format": FORMAT_VERSION,
        "method": fit.method,
        "covariates": covariates,
        "data": {"coords": fit.dataset.coords, "X": fit.dataset.X, "y": fit.dataset.y},
        "kept": None if fit.kept is None else fit.kept,
        "graph": {"order": fit.graph.order, "nbr": fit.graph.nbr, "counts": fit.graph.counts},
        "beta": {"mean": fit.beta.mu_beta, "cov": fit.beta.V_beta},
        "q_tau": {"shape": fit.q_tau.shape, "scale": fit.q_tau.scale},
        "q_sigma": {"shape": fit.q_sigma.shape, "scale": fit.q_sigma.scale},
        "phi": fit.phi,
        "w": {"mean": fit.w.mean, "var": fit.w.var},
        "epochs": fit.epochs,
        "converged": fit.converged,
        "prior": fit.prior.to_dict(),
        "config": fit.config.to_dict(),
        "state": _state_dict(fit.state),
        "fixed": fit.extras.get("fixed"),
    }


def fit_from_dict(d: dict) -> FitReport:
    if d.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported fit-state format {d.get('format')!r}")
    data = d["data"]
    ds = SpatialDataset(_arr(data["coords"]).reshape(-1, 2), _arr(data["X"]), _arr(data["y"]))
    g = d["graph"]
    nbr = _arr(g["nbr"], np.int64).reshape(ds.n, -1)
    graph = NeighborGraph(_arr(g["order"], np.int64), nbr, _arr(g["counts"], np.int64))
    p = ds.p
    beta = BetaPosterior(_arr(d["beta"]["mean"]), _arr(d["beta"]["cov"]).reshape(p, p))
    state = _state_from(d["state"])
    if isinstance(state, JointVariational):
        w = joint_summary(state, graph.order)
    elif isinstance(state, NngpVariational):
        w = nngp_summary(state, graph.order)
    else:
        w = GaussianSummary(_arr(d["w"]["mean"]), _arr(d["w"]["var"]), "diag")
    return FitReport(
        method=d["method"],
        dataset=ds,
        graph=graph,
        beta=beta,
        q_tau=InverseGammaPosterior(float(d["q_tau"]["shape"]), float(d["q_tau"]["scale"])),
        q_sigma=InverseGammaPosterior(float(d["q_sigma"]["shape"]), float(d["q_sigma"]["scale"])),
        phi=float(d["phi"]),
        w=w,
        elbo_trace=np.empty(0),
        epochs=int(d["epochs"]),
        converged=bool(d["converged"]),
        timings={},
        state=state,
        prior=PriorSpec(**d["prior"]),
        config=FitConfig(**d["config"]),
        kept=None if d["kept"] is None else _arr(d["kept"], np.int64),
        extras={"fixed": d.get("fixed")},
    )
