"""Normalized error metrics and the experiment suites.

Experiments train the selected methods on a shared task pool, then run the
full observer pipeline on validation tasks: simulate the plant, filter the
measured output, reconstruct the state with the learned inverse map (after
online adaptation for the meta method), and aggregate normalized errors past
the filter transient. Drivers emit plot-ready CSV rows and curves; ordering
comparisons live in the test suite.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import SamplingStrategy, online_adapt
from .data import (
    MixedDataset,
    Task,
    TaskDataset,
    TaskDistribution,
    generate_task_dataset,
    make_training_tasks,
    make_validation_tasks,
)
from .nn import MapParams, predict
from .observer import BackwardSamplingConfig, ObserverDesign, compute_tau, default_design, run_observer
from .sim import NoiseSpec, SystemModel, Trajectory, apply_noise, duffing_model
from .train import (
    MetaConfig,
    MetaState,
    TrainConfig,
    output_projection,
    train_meta,
    train_parallel_mixed,
    train_sequential_mixed,
)

__all__ = [
    "ErrorSeries",
    "ExperimentReport",
    "ExperimentConfig",
    "MethodArtifacts",
    "normalized_error",
    "error_series",
    "task_mean_error",
    "task_mean_curve",
    "time_mean_error",
    "train_method",
    "evaluate_on_task",
    "run_experiment_lambda",
    "run_experiment_x0",
    "error_profile_grid",
    "run_experiment_sampling",
    "write_results_csv",
    "write_curves_csv",
    "write_grid",
]

NORM_FLOOR = 1e-8
FLOAT_FMT = "%.17g"

METHODS = ("parallel", "sequential", "pinn", "meta")


@dataclass
class ErrorSeries:
    """Normalized state and latent errors along one validation run."""

    times: np.ndarray
    e_x: np.ndarray
    e_z: np.ndarray
    task_id: int
    flagged: np.ndarray  # rows where a truth norm hit the denominator floor

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.e_x) == len(self.e_z) == len(self.flagged) == n):
            raise ValueError("series lengths differ")


def normalized_error(truth: np.ndarray, estimate: np.ndarray,
                     floor: float = NORM_FLOOR) -> float:
    """||truth - estimate|| / ||truth|| with the denominator floored."""
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    denom = max(float(np.linalg.norm(truth)), floor)
    return float(np.linalg.norm(truth - estimate)) / denom


def _row_errors(truth: np.ndarray, estimate: np.ndarray,
                floor: float = NORM_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(truth, axis=1)
    flagged = norms < floor
    denom = np.maximum(norms, floor)
    err = np.linalg.norm(truth - estimate, axis=1) / denom
    return err, flagged


def error_series(times: np.ndarray, x_truth: np.ndarray, x_hat: np.ndarray,
                 z_truth: np.ndarray, z_hat: np.ndarray, task_id: int) -> ErrorSeries:
    e_x, flag_x = _row_errors(x_truth, x_hat)
    e_z, flag_z = _row_errors(z_truth, z_hat)
    return ErrorSeries(times=np.asarray(times), e_x=e_x, e_z=e_z,
                       task_id=task_id, flagged=flag_x | flag_z)


def task_mean_error(series: list[ErrorSeries], t: float) -> float:
    """Mean across tasks at one time point (shared grids required)."""
    base = series[0].times
    for s in series[1:]:
        if not np.array_equal(s.times, base):
            raise ValueError("error series do not share a time grid")
    k = int(np.argmin(np.abs(base - t)))
    if abs(base[k] - t) > 1e-9:
        raise ValueError(f"time {t} not on the series grid")
    return float(np.mean([s.e_x[k] for s in series]))


def task_mean_curve(series: list[ErrorSeries], which: str = "e_x") -> np.ndarray:
    base = series[0].times
    for s in series[1:]:
        if not np.array_equal(s.times, base):
            raise ValueError("error series do not share a time grid")
    return np.mean(np.stack([getattr(s, which) for s in series]), axis=0)


def time_mean_error(values: np.ndarray, literal: bool = True) -> float:
    """Time average of an error series.

    `literal=True` divides the sum of the N+1 samples by N (the stated
    convention); `literal=False` uses the plain mean.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty error series")
    if literal:
        if values.size == 1:
            return float(values[0])
        return float(np.sum(values) / (values.size - 1))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# experiment configuration and per-task evaluation


@dataclass(frozen=True)
class ExperimentConfig:
    dist: TaskDistribution
    train: TrainConfig
    meta: MetaConfig
    n_train_tasks: int = 5
    n_validation: int = 50
    n_out_of_range: int = 20
    meta_epochs: int | None = None  # outer-iteration budget; None: train.epochs
    dt: float = 0.02
    t_train: float = 20.0
    t_eval: float = 50.0
    sampling_horizon: float = 70.0
    epsilon: float = 1e-6
    transient: float | None = None  # None: -tau for a unit norm bound
    adapt_n_batch: int = 32
    adapt_strategy: SamplingStrategy = field(default_factory=lambda: SamplingStrategy("minimum"))
    noise: NoiseSpec | None = None
    literal_time_mean: bool = True
    jobs: int = 1
    grid_resolution: int = 21
    data_seed: int = 1009
    validation_seed: int = 2003

    def transient_time(self, design: ObserverDesign) -> float:
        if self.transient is not None:
            return self.transient
        cfg = BackwardSamplingConfig(epsilon=self.epsilon, z_norm_bound=1.0)
        return -compute_tau(design, cfg)


@dataclass
class MethodArtifacts:
    method: str
    theta: MapParams
    eta: MapParams
    alpha: float | None = None
    seed: int = 0

    def meta_state(self) -> MetaState:
        if self.alpha is None:
            raise ValueError(f"method '{self.method}' has no adaptation rate")
        return MetaState(eta=self.eta, alpha=self.alpha, history=[])


@dataclass
class ExperimentReport:
    """Raw rows plus aggregate curves; enough metadata to re-run bit-identically."""

    experiment: str
    rows: list[dict]
    curves: dict[str, np.ndarray]
    curve_times: np.ndarray
    seeds: list[int]
    config_hash: str = ""

    def seed_scalars(self, method: str, variant: str = "in-range",
                     strategy: str | None = None) -> dict[int, float]:
        """Per-seed mean of e_bar_t over the validation tasks."""
        out: dict[int, list[float]] = {}
        for row in self.rows:
            if row["method"] != method or row.get("variant", "in-range") != variant:
                continue
            if strategy is not None and row.get("strategy", "") != strategy:
                continue
            out.setdefault(row["seed"], []).append(row["e_bar_t"])
        return {s: float(np.mean(v)) for s, v in out.items()}

    def median_over_seeds(self, method: str, variant: str = "in-range",
                          strategy: str | None = None) -> float:
        scalars = self.seed_scalars(method, variant, strategy)
        return float(np.median(list(scalars.values())))


def train_method(method: str, mixed: MixedDataset, cfg: TrainConfig, mcfg: MetaConfig,
                 model: SystemModel, design: ObserverDesign, seed: int,
                 parallel_cache: MethodArtifacts | None = None,
                 meta_epochs: int | None = None) -> MethodArtifacts:
    """Train one method's maps on the shared pool.

    The meta method reuses the parallel run of the same seed: its forward map
    and, as pretraining, its inverse map.
    """
    run_cfg = replace(cfg, seed=seed, method=method)
    if method == "parallel":
        theta, eta, _ = train_parallel_mixed(mixed, run_cfg)
        return MethodArtifacts(method=method, theta=theta, eta=eta, seed=seed)
    if method in ("sequential", "pinn"):
        theta, eta, _ = train_sequential_mixed(mixed, run_cfg, model, design)
        return MethodArtifacts(method=method, theta=theta, eta=eta, seed=seed)
    if method == "meta":
        base = parallel_cache
        if base is None or base.seed != seed:
            theta, eta0, _ = train_parallel_mixed(mixed, replace(run_cfg, method="parallel"))
            base = MethodArtifacts(method="parallel", theta=theta, eta=eta0, seed=seed)
        eta_init = base.eta if mcfg.pretrain else None
        if meta_epochs is not None:
            run_cfg = replace(run_cfg, epochs=meta_epochs)
        state = train_meta(mixed, run_cfg, mcfg, model, eta_init=eta_init)
        return MethodArtifacts(method=method, theta=base.theta, eta=state.eta,
                               alpha=state.alpha, seed=seed)
    raise ValueError(f"unknown method '{method}'")


def _adapt_seed(seed: int, task_id: int) -> int:
    return int(np.random.SeedSequence([seed, task_id]).generate_state(1)[0])


def evaluate_on_task(artifacts: MethodArtifacts, task: Task, truth: TaskDataset,
                     model: SystemModel, design: ObserverDesign,
                     config: ExperimentConfig, seed: int,
                     strategy: SamplingStrategy | None = None,
                     noise: NoiseSpec | None = None) -> tuple[dict, ErrorSeries]:
    """Full observer pipeline on one validation task.

    The filter starts from F_theta(x(0)) and runs on the measured output;
    the meta method adapts its inverse map online from the filter state and
    the measurement before reconstruction. The scalar e_bar_t aggregates the
    post-transient window only.
    """
    x_truth = truth.x
    y_meas = truth.y
    if noise is not None:
        traj_n, y_meas = apply_noise(
            Trajectory(times=truth.times, states=truth.x), truth.y,
            replace(noise, seed=_adapt_seed(noise.seed, task.task_id)))
        x_truth = traj_n.states

    z0_hat = predict(artifacts.theta, task.x0[None, :])[0]
    z_traj = run_observer(design, z0_hat, y_meas, config.dt)

    strategy_name = ""
    eta_used = artifacts.eta
    if artifacts.method == "meta":
        strat = strategy if strategy is not None else config.adapt_strategy
        strategy_name = strat.kind
        h = output_projection(model)
        run = online_adapt(artifacts.meta_state(), z_traj, y_meas, strat,
                           config.adapt_n_batch, config.meta.n_adapt, h,
                           seed=_adapt_seed(seed, task.task_id))
        eta_used = run.eta_adapted

    x_hat = predict(eta_used, z_traj.states)
    z_hat = z_traj.states
    series = error_series(truth.times, x_truth, x_hat, truth.z, z_hat, task.task_id)

    mask = truth.times >= config.transient_time(design) - 1e-9
    e_bar_t = time_mean_error(series.e_x[mask], literal=config.literal_time_mean)
    row = {
        "method": artifacts.method,
        "task_id": task.task_id,
        "lambda": task.lam,
        "x0_1": float(task.x0[0]),
        "x0_2": float(task.x0[1]) if task.x0.size > 1 else 0.0,
        "strategy": strategy_name,
        "seed": seed,
        "e_bar_t": e_bar_t,
    }
    return row, series


# ---------------------------------------------------------------------------
# experiment drivers


def _generate_datasets(tasks: list[Task], model: SystemModel, design: ObserverDesign,
                       config: ExperimentConfig, horizon: float, jobs: int = 1
                       ) -> list[TaskDataset]:
    n_steps = int(round(horizon / config.dt))
    bs_cfg = BackwardSamplingConfig(epsilon=config.epsilon)
    if jobs > 1 and len(tasks) > 1:
        # workers rebuild the plant: SystemModel closures do not pickle
        args = [(t, design, bs_cfg, config.dt, n_steps) for t in tasks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_gen_ds_worker, args, chunksize=4))
    return [generate_task_dataset(t, model, design, bs_cfg, config.dt, n_steps)
            for t in tasks]


def _gen_ds_worker(args) -> TaskDataset:
    task, design, bs_cfg, dt, n_steps = args
    return generate_task_dataset(task, duffing_model(task.lam), design, bs_cfg, dt, n_steps)


def _system_model(config: ExperimentConfig) -> SystemModel:
    return duffing_model(config.dist.fixed_lambda)


def _training_pool(config: ExperimentConfig, model: SystemModel,
                   design: ObserverDesign) -> MixedDataset:
    tasks = make_training_tasks(config.dist, config.n_train_tasks, seed=config.data_seed)
    datasets = _generate_datasets(tasks, model, design, config, config.t_train,
                                  jobs=config.jobs)
    return MixedDataset(datasets=datasets)


def _seed_run(args) -> tuple[list[dict], dict[str, np.ndarray], dict[str, int]]:
    """Train every method for one seed and evaluate all validation variants."""
    (seed, methods, config, val_specs, mixed, strategies, artifacts_override) = args
    model = _system_model(config)
    design = default_design(model.dx)
    rows: list[dict] = []
    curve_sums: dict[str, np.ndarray] = {}
    curve_counts: dict[str, int] = {}
    parallel_cache: MethodArtifacts | None = None
    for method in methods:
        if artifacts_override is not None and artifacts_override.method == method:
            artifacts = artifacts_override
        else:
            artifacts = train_method(method, mixed, config.train, config.meta,
                                     model, design, seed, parallel_cache,
                                     meta_epochs=config.meta_epochs)
        if method == "parallel":
            parallel_cache = artifacts
        run_strategies = strategies if (strategies and method == "meta") else [None]
        for variant, tasks, truths, noise in val_specs:
            for strat in run_strategies:
                for task, truth in zip(tasks, truths):
                    row, series = evaluate_on_task(
                        artifacts, task, truth, model, design, config, seed,
                        strategy=strat, noise=noise)
                    row["variant"] = variant
                    rows.append(row)
                    key = method if strat is None else f"{method}:{strat.kind}"
                    key = f"{key}@{variant}"
                    if key not in curve_sums:
                        curve_sums[key] = np.zeros_like(series.e_x)
                        curve_counts[key] = 0
                    curve_sums[key] += series.e_x
                    curve_counts[key] += 1
    return rows, curve_sums, curve_counts


def _run_validation(methods: list[str], seeds: list[int], config: ExperimentConfig,
                    val_specs: list[tuple[str, list[Task], list[TaskDataset], NoiseSpec | None]],
                    mixed: MixedDataset, experiment: str,
                    strategies: list[SamplingStrategy] | None = None,
                    config_hash: str = "",
                    artifacts_override: MethodArtifacts | None = None) -> ExperimentReport:
    """Shared driver: per-seed work units, merged in seed order."""
    curve_times = val_specs[0][2][0].times
    jobs_args = [(seed, methods, config, val_specs, mixed, strategies,
                  artifacts_override) for seed in seeds]
    if config.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_seed_run, jobs_args))
    else:
        results = [_seed_run(a) for a in jobs_args]

    rows: list[dict] = []
    curve_sums: dict[str, np.ndarray] = {}
    curve_counts: dict[str, int] = {}
    for seed_rows, sums, counts in results:
        rows.extend(seed_rows)
        for key in sums:
            if key not in curve_sums:
                curve_sums[key] = np.zeros_like(sums[key])
                curve_counts[key] = 0
            curve_sums[key] += sums[key]
            curve_counts[key] += counts[key]
    curves = {k: curve_sums[k] / curve_counts[k] for k in curve_sums}
    return ExperimentReport(experiment=experiment, rows=rows, curves=curves,
                            curve_times=curve_times, seeds=list(seeds),
                            config_hash=config_hash)


def run_experiment_lambda(methods: list[str], seeds: list[int],
                          config: ExperimentConfig, config_hash: str = "") -> ExperimentReport:
    """Rate-parameter study: few training rates, dense in-range validation."""
    if config.dist.kind != "lambda-variation":
        raise ValueError("lambda experiment needs a lambda-variation distribution")
    model = _system_model(config)
    design = default_design(model.dx)
    mixed = _training_pool(config, model, design)
    val_tasks = make_validation_tasks(config.dist, "in-range", config.n_validation,
                                      seed=config.validation_seed)
    truths = _generate_datasets(val_tasks, model, design, config, config.t_eval,
                                jobs=config.jobs)
    specs = [("in-range", val_tasks, truths, None)]
    return _run_validation(methods, seeds, config, specs, mixed, "lambda",
                           config_hash=config_hash)


def run_experiment_x0(methods: list[str], seeds: list[int],
                      config: ExperimentConfig, config_hash: str = "") -> ExperimentReport:
    """Initial-state study: in-range, out-of-range, and noisy passes."""
    if config.dist.kind != "x0-variation":
        raise ValueError("x0 experiment needs an x0-variation distribution")
    model = _system_model(config)
    design = default_design(model.dx)
    mixed = _training_pool(config, model, design)
    val_in = make_validation_tasks(config.dist, "in-range", config.n_validation,
                                   seed=config.validation_seed)
    val_out = make_validation_tasks(config.dist, "out-of-range", config.n_out_of_range,
                                    seed=config.validation_seed + 1)
    truths_in = _generate_datasets(val_in, model, design, config, config.t_eval,
                                   jobs=config.jobs)
    truths_out = _generate_datasets(val_out, model, design, config, config.t_eval,
                                    jobs=config.jobs)
    noise = config.noise if config.noise is not None else NoiseSpec(0.1, 0.1, seed=97)
    specs = [
        ("in-range", val_in, truths_in, None),
        ("out-of-range", val_out, truths_out, None),
        ("in-range-noisy", val_in, truths_in, noise),
    ]
    return _run_validation(methods, seeds, config, specs, mixed, "x0",
                           config_hash=config_hash)


def error_profile_grid(method: str, seeds: list[int], config: ExperimentConfig,
                       config_hash: str = "",
                       artifacts: MethodArtifacts | None = None
                       ) -> tuple[np.ndarray, dict]:
    """e_bar_t over a uniform grid of initial states (heat-map data).

    With pre-trained `artifacts` the grid is evaluated directly; otherwise
    one training run per seed is performed and the grids are medianed.
    """
    model = _system_model(config)
    design = default_design(model.dx)
    res = config.grid_resolution
    box = config.dist.x0_domain
    ax1 = np.linspace(box[0, 0], box[0, 1], res)
    ax2 = np.linspace(box[1, 0], box[1, 1], res)
    tasks = [Task(task_id=i * res + j, lam=config.dist.fixed_lambda,
                  x0=np.array([ax1[i], ax2[j]]))
             for i in range(res) for j in range(res)]
    truths = _generate_datasets(tasks, model, design, config, config.t_eval,
                                jobs=config.jobs)

    def grid_for(arts: MethodArtifacts, seed: int) -> np.ndarray:
        values = np.empty(res * res)
        for k, (task, truth) in enumerate(zip(tasks, truths)):
            row, _ = evaluate_on_task(arts, task, truth, model, design,
                                      config, seed)
            values[k] = row["e_bar_t"]
        return values.reshape(res, res)

    if artifacts is not None:
        grid = grid_for(artifacts, artifacts.seed)
        used_seeds = [artifacts.seed]
    else:
        mixed = _training_pool(config, model, design)
        grids = [grid_for(train_method(method, mixed, config.train, config.meta,
                                       model, design, seed,
                                       meta_epochs=config.meta_epochs), seed)
                 for seed in seeds]
        grid = np.median(np.stack(grids), axis=0)
        used_seeds = list(seeds)
    axes = {"x1": [float(v) for v in ax1], "x2": [float(v) for v in ax2],
            "method": method, "seeds": used_seeds, "config_hash": config_hash}
    return grid, axes


def run_experiment_sampling(strategy_names: list[str], seeds: list[int],
                            config: ExperimentConfig, config_hash: str = "",
                            artifacts: MethodArtifacts | None = None) -> ExperimentReport:
    """Sampling-window ablation for the meta method over the x0 distribution.

    With pre-trained meta `artifacts`, training is skipped and all seeds
    reuse them (seeds then only steer the adaptation sampling)."""
    if config.dist.kind != "x0-variation":
        raise ValueError("sampling experiment needs an x0-variation distribution")
    model = _system_model(config)
    design = default_design(model.dx)
    delay = config.transient_time(design)
    window = config.t_eval
    kinds = {
        "minimum": SamplingStrategy("minimum"),
        "minimum-delayed": SamplingStrategy("minimum-delayed", delay=delay),
        "window-random": SamplingStrategy("window-random", window_length=window),
        "window-random-delayed": SamplingStrategy("window-random-delayed",
                                                  window_length=window, delay=delay),
    }
    strategies = [kinds[name] for name in strategy_names]
    mixed = _training_pool(config, model, design) if artifacts is None else MixedDataset(datasets=[])
    val_tasks = make_validation_tasks(config.dist, "in-range", config.n_validation,
                                      seed=config.validation_seed)
    truths = _generate_datasets(val_tasks, model, design, config,
                                config.sampling_horizon, jobs=config.jobs)
    specs = [("in-range", val_tasks, truths, None)]
    return _run_validation(["meta"], seeds, config, specs, mixed, "sampling",
                           strategies=strategies, config_hash=config_hash,
                           artifacts_override=artifacts)


# ---------------------------------------------------------------------------
# report serialization


RESULT_COLUMNS = ["method", "task_id", "lambda", "x0_1", "x0_2", "strategy",
                  "seed", "e_bar_t"]


def write_results_csv(report: ExperimentReport, path: str | Path,
                      variant: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in report.rows:
            if variant is not None and row.get("variant") != variant:
                continue
            writer.writerow([
                row["method"], str(row["task_id"]), FLOAT_FMT % row["lambda"],
                FLOAT_FMT % row["x0_1"], FLOAT_FMT % row["x0_2"],
                row["strategy"], str(row["seed"]), FLOAT_FMT % row["e_bar_t"],
            ])


def write_curves_csv(report: ExperimentReport, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "t", "e_bar_T"])
        for key in sorted(report.curves):
            curve = report.curves[key]
            for t, v in zip(report.curve_times, curve):
                writer.writerow([key, FLOAT_FMT % t, FLOAT_FMT % v])


def write_grid(grid: np.ndarray, axes: dict, grid_path: str | Path,
               sidecar_path: str | Path) -> None:
    with Path(grid_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([FLOAT_FMT % v for v in row])
    Path(sidecar_path).write_text(json.dumps(axes, indent=2, sort_keys=True) + "\n")
