"""Shared setup for every fitter: ordering, neighbor geometry and start values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spvb.config import FitConfig, PriorSpec, default_prior
from spvb.conjugate import DesignQR
from spvb.initial import InitialEstimates, initial_estimates
from spvb.spatial import (
    NeighborGeometry,
    NeighborGraph,
    SpatialDataset,
    build_neighbor_graph,
)

# stream identifiers for independent random sequences derived from one seed
STREAM_MC = 1
STREAM_BATCHES = 2
STREAM_PREDICT = 3


def generator(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one named stream of a seeded run."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


@dataclass(frozen=True)
class Problem:
    """Dataset in processing order plus everything derived from it once.

    Attributes:
        dataset: data in input order.
        ordered: data permuted into processing order.
        graph: prior neighbor graph (positions in processing order).
        geometry: cached neighbor distances for factor rebuilds.
        qr: QR factorization of the ordered design matrix.
        init: profile-likelihood start values.
        prior, config: settings.
    """

    dataset: SpatialDataset
    ordered: SpatialDataset
    graph: NeighborGraph
    geometry: NeighborGeometry
    qr: DesignQR
    init: InitialEstimates
    prior: PriorSpec
    config: FitConfig

    @property
    def bounds(self) -> tuple[float, float]:
        return self.prior.phi_min, self.prior.phi_max

    @property
    def inverse_order(self) -> np.ndarray:
        inv = np.empty_like(self.graph.order)
        inv[self.graph.order] = np.arange(self.graph.order.size)
        return inv

    def to_input_order(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[self.inverse_order]


def prepare(
    dataset: SpatialDataset,
    prior: PriorSpec | None = None,
    config: FitConfig | None = None,
    init: InitialEstimates | None = None,
) -> Problem:
    config = config or FitConfig()
    if prior is None:
        prior = default_prior(dataset.coords) if dataset.n > 1 else PriorSpec()
    m = min(config.m, max(dataset.n - 1, 1))
    graph = build_neighbor_graph(dataset.coords, m, config.ordering)
    ordered = dataset.take(graph.order)
    geometry = NeighborGeometry.build(dataset.coords, graph)
    qr = DesignQR.from_X(ordered.X)
    if init is None:
        init = initial_estimates(dataset, prior, m=config.m, seed=config.rng_seed)
    return Problem(dataset, ordered, graph, geometry, qr, init, prior, config)
