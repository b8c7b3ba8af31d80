"""Task distributions and synthetic dataset generation.

A task is one plant instance (a rate parameter or an initial state). Its
dataset holds time-aligned (x, z, y) samples: z starts from the
backward-sampled steady state F(x(0)) and both systems are co-simulated
forward as one augmented ODE, so the pairs satisfy the observer dynamics to
integrator accuracy.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .observer import BackwardSamplingConfig, ObserverDesign, backward_sample_init
from .sim import NoiseSpec, SimGrid, SystemModel, Trajectory, apply_noise, output_samples, simulate

__all__ = [
    "Task",
    "TaskDistribution",
    "TaskDataset",
    "MixedDataset",
    "latin_hypercube",
    "make_training_tasks",
    "make_validation_tasks",
    "generate_task_dataset",
    "split_adapt_query",
    "write_task_csv",
    "read_task_csv",
    "write_manifest",
]

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class Task:
    task_id: int
    lam: float
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=np.float64))


@dataclass(frozen=True)
class TaskDistribution:
    """Family of tasks varying either the rate parameter or the initial state."""

    kind: str  # "lambda-variation" | "x0-variation"
    lambda_range: tuple[float, float] = (1.0, 5.0)
    x0_domain: np.ndarray = field(default_factory=lambda: np.array([[-1.0, 1.0], [-1.0, 1.0]]))
    fixed_lambda: float = 1.0
    fixed_x0: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))

    def __post_init__(self):
        if self.kind not in ("lambda-variation", "x0-variation"):
            raise ValueError(f"unknown task distribution kind '{self.kind}'")
        object.__setattr__(self, "x0_domain", np.asarray(self.x0_domain, dtype=np.float64))
        object.__setattr__(self, "fixed_x0", np.asarray(self.fixed_x0, dtype=np.float64))
        if self.kind == "lambda-variation" and self.lambda_range[0] >= self.lambda_range[1]:
            raise ValueError("lambda_range must be non-degenerate")
        if self.kind == "x0-variation" and np.any(self.x0_domain[:, 0] >= self.x0_domain[:, 1]):
            raise ValueError("x0_domain must be non-degenerate")

    def outer_x0_domain(self) -> np.ndarray:
        """Enclosing box for out-of-range sampling: the domain doubled about its center."""
        center = self.x0_domain.mean(axis=1, keepdims=True)
        return center + 2.0 * (self.x0_domain - center)


@dataclass
class TaskDataset:
    """Time-indexed (x, z, y) samples for one task."""

    task: Task
    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if not (self.x.shape[0] == self.z.shape[0] == self.y.shape[0] == n):
            raise ValueError("times, x, z, y must have equal row counts")

    def __len__(self):
        return len(self.times)


@dataclass
class MixedDataset:
    """Union of task datasets with a flat (task position, row) index."""

    datasets: list[TaskDataset]
    index: np.ndarray = field(init=False)

    def __post_init__(self):
        pairs = [(k, r) for k, ds in enumerate(self.datasets) for r in range(len(ds))]
        self.index = np.array(pairs, dtype=np.int64).reshape(len(pairs), 2)

    @property
    def x_all(self) -> np.ndarray:
        return np.concatenate([ds.x for ds in self.datasets], axis=0)

    @property
    def z_all(self) -> np.ndarray:
        return np.concatenate([ds.z for ds in self.datasets], axis=0)

    @property
    def y_all(self) -> np.ndarray:
        return np.concatenate([ds.y for ds in self.datasets], axis=0)

    def __len__(self):
        return self.index.shape[0]


def latin_hypercube(n: int, box: np.ndarray, seed: int) -> np.ndarray:
    """One sample per axis stratum: n points in a d-dimensional box."""
    if n < 1:
        raise ValueError("n must be >= 1")
    box = np.asarray(box, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = box.shape[0]
    out = np.empty((n, d))
    for j in range(d):
        lo, hi = box[j]
        strata = rng.permutation(n)
        jitter = rng.uniform(size=n)
        out[:, j] = lo + (hi - lo) * (strata + jitter) / n
    return out


def make_training_tasks(dist: TaskDistribution, n: int, seed: int) -> list[Task]:
    """Evenly spaced rate values, or a Latin hypercube of initial states."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if dist.kind == "lambda-variation":
        lo, hi = dist.lambda_range
        lams = np.array([0.5 * (lo + hi)]) if n == 1 else np.linspace(lo, hi, n)
        return [Task(task_id=i, lam=float(l), x0=dist.fixed_x0) for i, l in enumerate(lams)]
    points = latin_hypercube(n, dist.x0_domain, seed)
    return [Task(task_id=i, lam=dist.fixed_lambda, x0=points[i]) for i in range(n)]


def make_validation_tasks(dist: TaskDistribution, kind: str, n: int, seed: int) -> list[Task]:
    """Validation tasks: `in-range` resamples the training domain, `out-of-range`
    draws uniformly from the enclosing box minus the training box (rejection)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("in-range", "out-of-range"):
        raise ValueError(f"unknown validation kind '{kind}'")
    if dist.kind == "lambda-variation":
        if kind == "out-of-range":
            raise ValueError("out-of-range validation is defined for x0 variation only")
        lo, hi = dist.lambda_range
        # stratum midpoints: evenly spaced, never on the training grid
        lams = lo + (np.arange(n) + 0.5) * (hi - lo) / n
        return [Task(task_id=i, lam=float(l), x0=dist.fixed_x0) for i, l in enumerate(lams)]
    if kind == "in-range":
        points = latin_hypercube(n, dist.x0_domain, seed)
        return [Task(task_id=i, lam=dist.fixed_lambda, x0=points[i]) for i in range(n)]
    inner = dist.x0_domain
    outer = dist.outer_x0_domain()
    rng = np.random.default_rng(seed)
    points = []
    while len(points) < n:
        p = rng.uniform(outer[:, 0], outer[:, 1])
        if np.any((p < inner[:, 0]) | (p > inner[:, 1])):
            points.append(p)
    return [Task(task_id=i, lam=dist.fixed_lambda, x0=points[i]) for i in range(n)]


def model_for_task(model: SystemModel, task: Task) -> SystemModel:
    return replace(model, param=np.array([task.lam]))


def generate_task_dataset(task: Task, model: SystemModel, design: ObserverDesign,
                          cfg: BackwardSamplingConfig, dt: float, n_steps: int,
                          noise: NoiseSpec | None = None) -> TaskDataset:
    """Backward-sample z(0), then co-simulate plant and observer forward.

    Noise, when requested, perturbs the sampled states and outputs after
    simulation; the z labels are never perturbed.
    """
    m = model_for_task(model, task)
    z0, _, _ = backward_sample_init(m, design, task.x0, cfg, dt)

    if n_steps == 0:
        times = np.zeros(1)
        x = task.x0[None, :].copy()
        z = z0[None, :]
        y = output_samples(m, x)
        if noise is not None:
            traj, y = apply_noise(Trajectory(times=times, states=x), y, noise)
            x = traj.states
        return TaskDataset(task=task, times=times, x=x, z=z, y=y)

    dz = design.dz

    def rhs_aug(w: np.ndarray, p: np.ndarray) -> np.ndarray:
        x_part, z_part = w[: m.dx], w[m.dx:]
        y_now = m.output(x_part)
        forcing = design.b * (y_now[0] if y_now.size == 1 else np.sum(y_now))
        return np.concatenate([m.rhs(x_part, p), design.a_diag * z_part + forcing])

    coupled = SystemModel(dx=m.dx + dz, dy=m.dy,
                          rhs=rhs_aug, output=lambda w: m.output(w[: m.dx]),
                          param=m.param)
    traj = simulate(coupled, np.concatenate([task.x0, z0]), SimGrid(0.0, dt, n_steps))
    x = traj.states[:, : m.dx]
    z = traj.states[:, m.dx:]
    y = output_samples(m, x)
    if noise is not None:
        x_traj, y = apply_noise(Trajectory(times=traj.times, states=x), y, noise)
        x = x_traj.states
    return TaskDataset(task=task, times=traj.times, x=x, z=z, y=y)


def split_adapt_query(ds: TaskDataset, n_adapt_points: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint uniformly-random row index sets (adaptation, query)."""
    n = len(ds)
    if n_adapt_points >= n:
        raise ValueError(f"n_adapt_points ({n_adapt_points}) must be < rows ({n})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    return np.sort(perm[:n_adapt_points]), np.sort(perm[n_adapt_points:])


# ---------------------------------------------------------------------------
# serialization


def _columns(dx: int, dz: int, dy: int) -> list[str]:
    cols = ["task_id", "lambda", "t"]
    cols += [f"x{i + 1}" for i in range(dx)]
    cols += [f"z{i + 1}" for i in range(dz)]
    cols += [f"y{i + 1}" for i in range(dy)]
    return cols


def write_task_csv(ds: TaskDataset, path: str | Path) -> None:
    path = Path(path)
    dx, dz, dy = ds.x.shape[1], ds.z.shape[1], ds.y.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_columns(dx, dz, dy))
        for k in range(len(ds)):
            row = [str(ds.task.task_id), FLOAT_FMT % ds.task.lam, FLOAT_FMT % ds.times[k]]
            row += [FLOAT_FMT % v for v in ds.x[k]]
            row += [FLOAT_FMT % v for v in ds.z[k]]
            row += [FLOAT_FMT % v for v in ds.y[k]]
            writer.writerow(row)


def read_task_csv(path: str | Path) -> TaskDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    dx = sum(1 for c in header if c.startswith("x") and c != "x0")
    dz = sum(1 for c in header if c.startswith("z"))
    dy = sum(1 for c in header if c.startswith("y"))
    data = np.array([[float(v) for v in row[1:]] for row in rows])
    task = Task(task_id=int(rows[0][0]), lam=data[0, 0],
                x0=data[0, 2: 2 + dx])
    times = data[:, 1]
    x = data[:, 2: 2 + dx]
    z = data[:, 2 + dx: 2 + dx + dz]
    y = data[:, 2 + dx + dz: 2 + dx + dz + dy]
    return TaskDataset(task=task, times=times, x=x, z=z, y=y)


def write_manifest(path: str | Path, config: dict, seeds: dict, tasks: list[Task]) -> None:
    doc = {
        "config": config,
        "seeds": seeds,
        "tasks": [
            {"task_id": t.task_id, "lambda": t.lam, "x0": [float(v) for v in t.x0]}
            for t in tasks
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
