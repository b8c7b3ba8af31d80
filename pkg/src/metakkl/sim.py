"""Nonlinear system models and fixed-step RK4 integration.

The only concrete plant is a cubic variant of the Duffing oscillator with a
scalar rate parameter; everything else works against the generic
`SystemModel` interface. Backward simulation is plain RK4 with a negative
step, which keeps the forward/backward code path identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SystemModel",
    "SimGrid",
    "Trajectory",
    "NoiseSpec",
    "SimulationError",
    "duffing_rhs",
    "duffing_output",
    "duffing_model",
    "rk4_step",
    "simulate",
    "apply_noise",
    "output_samples",
]

DIVERGENCE_NORM = 1e6


class SimulationError(RuntimeError):
    """Raised when integration produces non-finite or diverging states."""


@dataclass(frozen=True)
class SystemModel:
    """Autonomous plant: state derivative `rhs(x, param)` and output `output(x)`."""

    dx: int
    dy: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    param: np.ndarray

    def __post_init__(self):
        if self.dx < 1 or self.dy < 1:
            raise ValueError("state and output dimensions must be >= 1")
        object.__setattr__(self, "param", np.asarray(self.param, dtype=np.float64))


@dataclass(frozen=True)
class SimGrid:
    """Uniform time grid: `n_steps` steps of size `dt` starting at `t0`."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt == 0.0:
            raise ValueError("dt must be nonzero")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("times and states row counts differ")
        if self.times.size > 1:
            steps = np.diff(self.times)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise ValueError("times must be strictly monotone")


@dataclass(frozen=True)
class NoiseSpec:
    """Per-element Gaussian perturbation variances for states and outputs."""

    var_x: float = 0.0
    var_y: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.var_x < 0 or self.var_y < 0:
            raise ValueError("noise variances must be >= 0")


def duffing_rhs(x: np.ndarray, lam: float) -> np.ndarray:
    """Cubic Duffing variant: dx1 = lam*x2^3, dx2 = -lam*x1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,):
        raise ValueError(f"duffing state must be a 2-vector, got shape {x.shape}")
    if not (np.all(np.isfinite(x)) and np.isfinite(lam)):
        raise SimulationError("non-finite duffing state or parameter")
    return np.array([lam * x[1] ** 3, -lam * x[0]])


def duffing_output(x: np.ndarray) -> np.ndarray:
    """Measured output: first state component."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,):
        raise ValueError(f"duffing state must be a 2-vector, got shape {x.shape}")
    return x[:1].copy()


def duffing_model(lam: float = 1.0) -> SystemModel:
    return SystemModel(
        dx=2,
        dy=1,
        rhs=lambda x, p: duffing_rhs(x, float(p[0])),
        output=duffing_output,
        param=np.array([lam]),
    )


def rk4_step(rhs: Callable[[np.ndarray, float], np.ndarray], x: np.ndarray,
             t: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step; `dt` may be negative."""
    if dt == 0.0:
        raise ValueError("dt must be nonzero")
    k1 = rhs(x, t)
    k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = rhs(x + dt * k3, t + dt)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"non-finite state after step at t={t}")
    return out


def simulate(model: SystemModel, x0: np.ndarray, grid: SimGrid,
             max_norm: float = DIVERGENCE_NORM) -> Trajectory:
    """Integrate the plant over the grid; states[0] is `x0` exactly."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (model.dx,):
        raise ValueError(f"x0 must have shape ({model.dx},), got {x0.shape}")
    rhs = lambda x, t: model.rhs(x, model.param)
    states = np.empty((grid.n_steps + 1, model.dx))
    states[0] = x0
    times = grid.times()
    x = x0
    for k in range(grid.n_steps):
        x = rk4_step(rhs, x, times[k], grid.dt)
        if np.linalg.norm(x) > max_norm:
            raise SimulationError(
                f"trajectory diverged at step {k + 1} (t={times[k + 1]:g}): "
                f"norm exceeds {max_norm:g}"
            )
        states[k + 1] = x
    return Trajectory(times=times, states=states)


def output_samples(model: SystemModel, states: np.ndarray) -> np.ndarray:
    """Apply the output map row-wise: (N, dx) -> (N, dy)."""
    return np.stack([model.output(row) for row in np.asarray(states)])


def apply_noise(traj: Trajectory, y: np.ndarray, noise: NoiseSpec) -> tuple[Trajectory, np.ndarray]:
    """Add i.i.d. zero-mean Gaussian samples to states and outputs.

    Deterministic per seed; a zero variance leaves the corresponding array
    bit-identical (no draw is consumed for it).
    """
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(noise.seed)
    states = traj.states
    if noise.var_x > 0:
        states = states + rng.normal(0.0, np.sqrt(noise.var_x), size=states.shape)
    if noise.var_y > 0:
        y = y + rng.normal(0.0, np.sqrt(noise.var_y), size=y.shape)
    return Trajectory(times=traj.times.copy(), states=np.array(states)), np.array(y)
