"""Prior hyperparameters and run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from spvb.spatial import SpatialError, max_distance


class ConfigError(ValueError):
    """A configuration value violates its documented constraint."""


@dataclass(frozen=True)
class PriorSpec:
    """Inverse-gamma priors on the variances and uniform bounds on phi.

    Attributes:
        a_tau, b_tau: shape and scale for the nugget variance.
        a_sigma, b_sigma: shape and scale for the spatial variance.
        phi_min, phi_max: support of the decay parameter.
    """

    a_tau: float = 1.0
    b_tau: float = 1.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    phi_min: float = 0.3
    phi_max: float = 3.0

    def __post_init__(self):
        for name in ("a_tau", "b_tau", "a_sigma", "b_sigma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if not (np.isfinite(self.phi_min) and self.phi_min > 0):
            raise ConfigError(f"phi_min must be positive, got {self.phi_min}")
        if not (np.isfinite(self.phi_max) and self.phi_max > self.phi_min):
            raise ConfigError(
                f"phi_max must exceed phi_min, got ({self.phi_min}, {self.phi_max})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FitConfig:
    """Algorithm settings shared by the fitters.

    Attributes:
        m: prior neighbor count.
        m_q: variational neighbor count (nested in the prior sets).
        n_mc: Monte Carlo draws per epoch.
        max_epochs: epoch cap.
        batch_size: mini-batch size, 0 for full batch.
        adadelta_rate: AdaDelta decay r.
        adadelta_noise: AdaDelta constant delta.
        stop_window: trailing window P for the stopping average.
        stop_patience: tolerated consecutive non-improvements K.
        rng_seed: seed for every random stream of a fit.
        phi_grad_step: finite-difference step relative to the phi range.
        ordering: location ordering policy (``"coord"`` or ``"given"``).
    """

    m: int = 15
    m_q: int = 3
    n_mc: int = 30
    max_epochs: int = 1500
    batch_size: int = 0
    adadelta_rate: float = 0.85
    adadelta_noise: float = 1e-6
    stop_window: int = 50
    stop_patience: int = 10
    rng_seed: int = 0
    phi_grad_step: float = 1e-3
    ordering: str = "coord"

    def __post_init__(self):
        if self.m_q < 1:
            raise ConfigError(f"m_q must be at least 1, got {self.m_q}")
        if self.m < self.m_q:
            raise ConfigError(f"m must be >= m_q, got m={self.m}, m_q={self.m_q}")
        if self.n_mc < 1:
            raise ConfigError(f"n_mc must be at least 1, got {self.n_mc}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be >= 0, got {self.batch_size}")
        if not 0 < self.adadelta_rate < 1:
            raise ConfigError(f"adadelta_rate must lie in (0, 1), got {self.adadelta_rate}")
        if not self.adadelta_noise > 0:
            raise ConfigError(f"adadelta_noise must be positive, got {self.adadelta_noise}")
        if self.stop_window < 1:
            raise ConfigError(f"stop_window must be at least 1, got {self.stop_window}")
        if self.stop_patience < 0:
            raise ConfigError(f"stop_patience must be >= 0, got {self.stop_patience}")
        if not 0 < self.phi_grad_step < 0.5:
            raise ConfigError(f"phi_grad_step must lie in (0, 0.5), got {self.phi_grad_step}")
        if self.ordering not in ("coord", "given"):
            raise ConfigError(f"ordering must be 'coord' or 'given', got {self.ordering!r}")

    def with_(self, **kw) -> "FitConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def default_phi_bounds(coords) -> tuple[float, float]:
    """``(3 / d_max, 30 / d_max)`` from the largest pairwise distance."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] < 2:
        raise ConfigError("phi bounds need at least two locations")
    dmax = max_distance(coords)
    if dmax <= 0:
        raise ConfigError("all locations coincide; phi bounds undefined")
    return 3.0 / dmax, 30.0 / dmax


def default_prior(coords) -> PriorSpec:
    lo, hi = default_phi_bounds(coords)
    return PriorSpec(phi_min=lo, phi_max=hi)


def default_config(n: int | None = None, method: str = "nngp") -> FitConfig:
    """Defaults: m=15, m_q=3, 30 draws, 1500 epochs (1000 for mean-field)."""
    epochs = 1000 if method.startswith("mfa") else 1500
    return FitConfig(max_epochs=epochs)


PRIOR_KEYS = {f.name for f in fields(PriorSpec)}
CONFIG_KEYS = {f.name for f in fields(FitConfig)}


def split_settings(settings: dict) -> tuple[dict, dict, dict]:
    """Partition a flat mapping into prior fields, config fields and the rest."""
    prior = {k: v for k, v in settings.items() if k in PRIOR_KEYS}
    cfg = {k: v for k, v in settings.items() if k in CONFIG_KEYS}
    rest = {k: v for k, v in settings.items() if k not in PRIOR_KEYS | CONFIG_KEYS}
    return prior, cfg, rest


__all__ = [
    "ConfigError",
    "FitConfig",
    "PriorSpec",
    "SpatialError",
    "default_config",
    "default_phi_bounds",
    "default_prior",
    "split_settings",
]
