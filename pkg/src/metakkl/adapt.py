"""Online adaptation of the meta-learned inverse map from measured outputs.

At deployment the inverse map is specialized to the observed system with a
few output-loss gradient steps. Samples pair the running filter state with
the measured output; the sampling window can be delayed (so the filter's
initialization error has decayed) and/or extended with random sampling
inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .nn import MapParams
from .sim import Trajectory
from .train import MetaState, loss_Ly, sgd_step

__all__ = [
    "SamplingStrategy",
    "AdaptationRun",
    "STRATEGY_KINDS",
    "t_init_min",
    "select_samples",
    "online_adapt",
]

STRATEGY_KINDS = ("minimum", "minimum-delayed", "window-random", "window-random-delayed")


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str
    window_length: float | None = None  # seconds, window kinds only
    delay: float = 0.0                  # seconds; delayed kinds use -tau

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown sampling strategy '{self.kind}'")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.kind.startswith("window") and (self.window_length is None
                                               or self.window_length <= 0):
            raise ValueError("window kinds need a positive window_length")


@dataclass
class AdaptationRun:
    eta_adapted: MapParams
    samples_used: np.ndarray
    t_init_actual: float


def t_init_min(n_batch: int, n_adapt: int, dt: float) -> float:
    """Minimum sampling-period duration: one fresh sample per processed point."""
    if n_batch < 0 or n_adapt < 0 or dt <= 0:
        raise ValueError("n_batch, n_adapt must be >= 0 and dt > 0")
    return n_batch * n_adapt * dt


def select_samples(strategy: SamplingStrategy, z_traj: Trajectory, y: np.ndarray,
                   n_batch: int, n_adapt: int, seed: int
                   ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pick `n_adapt` time-ordered batches of (filter state, output) samples.

    Minimum kinds take consecutive samples right after the delay boundary;
    window kinds draw uniformly without replacement from the whole window,
    sort, and chunk. Deterministic per seed. Returns the batches plus the
    flat index array of every sample used.
    """
    y = np.asarray(y, dtype=np.float64)
    n_rows = z_traj.states.shape[0]
    if y.shape[0] != n_rows:
        raise ValueError("z trajectory and y sample counts differ")
    dt = float(z_traj.times[1] - z_traj.times[0]) if n_rows > 1 else 0.0
    if dt <= 0:
        raise ValueError("z trajectory must have at least two forward-time samples")
    start = math.ceil(strategy.delay / dt - 1e-12)
    needed = n_batch * n_adapt

    if strategy.kind.startswith("minimum"):
        end = start + needed
        if end > n_rows:
            raise ValueError(
                f"trajectory too short: strategy needs {(end - 1) * dt:.4g} s "
                f"({end} samples), have {(n_rows - 1) * dt:.4g} s"
            )
        indices = np.arange(start, end)
    else:
        window_samples = math.floor(strategy.window_length / dt + 1e-12) + 1
        end = start + window_samples
        if end > n_rows:
            raise ValueError(
                f"trajectory too short: strategy needs {(end - 1) * dt:.4g} s "
                f"({end} samples), have {(n_rows - 1) * dt:.4g} s"
            )
        if window_samples < needed:
            raise ValueError("window shorter than the required sample count")
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(window_samples, size=needed, replace=False) + start)

    batches = []
    for j in range(n_adapt):
        idx = indices[j * n_batch:(j + 1) * n_batch]
        batches.append((z_traj.states[idx], y[idx]))
    return batches, indices


def online_adapt(meta: MetaState, z_traj: Trajectory, y: np.ndarray,
                 strategy: SamplingStrategy, n_batch: int, n_adapt: int,
                 h: Callable[[Value], Value], seed: int = 0) -> AdaptationRun:
    """Run the inner-loop updates on measured data with the meta-learned rate.

    Plain gradient steps on the output loss; no second-order graph is needed
    at deployment time.
    """
    batches, indices = select_samples(strategy, z_traj, y, n_batch, n_adapt, seed)
    eta = meta.eta.copy()
    arrays = nn.param_arrays(eta)
    for z_b, y_b in batches:
        eta = nn.with_arrays(eta, arrays)
        values = nn.value_params(eta)
        ly = loss_Ly(y_b, z_b, eta, h, inv_values=values)
        grads = [g.data for g in ad.grad(ly, values)]
        arrays = sgd_step(arrays, grads, meta.alpha)
    eta = nn.with_arrays(eta, arrays)
    dt = float(z_traj.times[1] - z_traj.times[0])
    start = math.ceil(strategy.delay / dt - 1e-12)
    t_init_actual = (int(indices[-1]) - start + 1) * dt if len(indices) else 0.0
    return AdaptationRun(eta_adapted=eta, samples_used=indices,
                         t_init_actual=float(t_init_actual))
