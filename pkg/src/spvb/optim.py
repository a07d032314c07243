"""AdaDelta steps, the trailing-average stopping rule and mini-batch schedules."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdaDeltaState:
    """Running averages for one parameter group.

    Attributes:
        Eg2: running mean of squared gradients.
        Edx2: running mean of squared updates.
        r: decay rate.
        delta: stabilising constant.
    """

    Eg2: np.ndarray
    Edx2: np.ndarray
    r: float = 0.85
    delta: float = 1e-6

    @classmethod
    def zeros(cls, shape, r=0.85, delta=1e-6) -> "AdaDeltaState":
        return cls(np.zeros(shape), np.zeros(shape), r, delta)

    def halve(self) -> None:
        self.Eg2 *= 0.5
        self.Edx2 *= 0.5


def adadelta_step(state: AdaDeltaState, g) -> tuple[AdaDeltaState, np.ndarray]:
    """Update the accumulators in place and return the ascent increment."""
    g = np.asarray(g, dtype=float)
    r, d = state.r, state.delta
    state.Eg2 = r * state.Eg2 + (1 - r) * g * g
    step = np.sqrt(state.Edx2 + d) / np.sqrt(state.Eg2 + d) * g
    state.Edx2 = r * state.Edx2 + (1 - r) * step * step
    return state, step


@dataclass
class StoppingState:
    """Trailing-average patience rule.

    Once ``P`` values are in the window, each new trailing average either
    beats the best so far (resetting the counter) or counts as a failure.
    """

    P: int = 50
    K: int = 10
    window: deque = field(default_factory=deque)
    best_avg: float = -np.inf
    fail_count: int = 0
    averages: list = field(default_factory=list)

    def __post_init__(self):
        self.window = deque(self.window, maxlen=self.P)


def should_stop(state: StoppingState, new_elbo: float) -> bool:
    """Push one ELBO value; true once the patience budget is exhausted."""
    state.window.append(float(new_elbo))
    if len(state.window) < state.P:
        return False
    avg = math.fsum(state.window) / state.P
    state.averages.append(avg)
    if avg > state.best_avg:
        state.best_avg = avg
        state.fail_count = 0
    else:
        state.fail_count += 1
    return state.fail_count > state.K


def make_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Random partition of ``range(n)`` into consecutive chunks."""
    if n < 1:
        raise ValueError("n must be positive")
    if batch_size < 0 or batch_size > n:
        raise ValueError(f"batch_size must lie in [0, {n}], got {batch_size}")
    if batch_size in (0, n):
        yield np.arange(n)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(perm[start : start + batch_size])
