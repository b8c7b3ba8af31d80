"""Command-line entry point: generate, train, eval, adapt.

Every command is deterministic under a fixed seed. Seed precedence:
`--seed` flag, then the METAKKL_SEED environment variable, then the config
file. Exit codes: 0 success, 2 usage or configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapt import STRATEGY_KINDS, online_adapt
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    MixedDataset,
    Task,
    generate_task_dataset,
    make_training_tasks,
    read_task_csv,
    write_manifest,
    write_task_csv,
)
from .evaluation import (
    METHODS,
    ExperimentConfig,
    MethodArtifacts,
    error_profile_grid,
    evaluate_on_task,
    run_experiment_lambda,
    run_experiment_sampling,
    run_experiment_x0,
    write_curves_csv,
    write_grid,
    write_results_csv,
)
from .nn import predict
from .observer import BackwardSamplingConfig, default_design, run_observer
from .sim import SimulationError, duffing_model
from .train import (
    TrainingDiverged,
    output_projection,
    train_meta,
    train_parallel_mixed,
    train_sequential_mixed,
)

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metakkl",
        description="Learning-based KKL observers with meta-learned online adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required=True):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="worker parallelism degree")

    p_gen = sub.add_parser("generate", help="write training task datasets")
    common(p_gen)

    p_train = sub.add_parser("train", help="train maps on generated datasets")
    common(p_train)
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--method", required=True, choices=METHODS)
    p_train.add_argument("--pretrain", action="store_true",
                         help="pre-train the inverse map in the parallel setting")
    p_train.add_argument("--pinn-weight", type=float, default=None)
    p_train.add_argument("--first-order", action="store_true",
                         help="detach inner-loop gradients in the meta-update")

    p_eval = sub.add_parser("eval", help="run an experiment suite")
    common(p_eval)
    p_eval.add_argument("--experiment", required=True,
                        choices=["lambda", "x0", "grid", "sampling"])
    p_eval.add_argument("--checkpoints", default=None,
                        help="checkpoint directory (required for grid and sampling)")
    p_eval.add_argument("--method", default="meta", choices=METHODS,
                        help="method for the grid experiment")
    p_eval.add_argument("--force", action="store_true",
                        help="skip the checkpoint/config hash check")

    p_adapt = sub.add_parser("adapt", help="adapt a meta checkpoint on one task")
    common(p_adapt)
    p_adapt.add_argument("--checkpoint", required=True, help="meta checkpoint file")
    p_adapt.add_argument("--strategy", default=None, choices=list(STRATEGY_KINDS))
    p_adapt.add_argument("--task-lambda", type=float, default=None)
    p_adapt.add_argument("--task-x0", default=None,
                         help="comma-separated initial state, e.g. '0.5,0.5'")
    p_adapt.add_argument("--force", action="store_true")
    return parser


def _resolve_seed(args, config: RunConfig) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("METAKKL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"METAKKL_SEED is not an integer: {env!r}") from None
    return config.seed


def _experiment_config(config: RunConfig, seed: int, jobs: int) -> ExperimentConfig:
    doc = config.doc
    return ExperimentConfig(
        dist=config.distribution(),
        train=config.train_config(seed=seed),
        meta=config.meta_config(),
        n_train_tasks=int(doc["dataset"]["n_train_tasks"]),
        n_validation=int(doc["evaluation"]["n_validation"]),
        n_out_of_range=int(doc["evaluation"]["n_out_of_range"]),
        meta_epochs=int(doc["meta"]["epochs"]),
        dt=float(doc["dataset"]["dt"]),
        t_train=float(doc["dataset"]["t_train"]),
        t_eval=float(doc["dataset"]["t_eval"]),
        sampling_horizon=float(doc["dataset"]["sampling_horizon"]),
        epsilon=float(doc["observer"]["epsilon"]),
        transient=doc["evaluation"]["transient"],
        adapt_n_batch=int(doc["adaptation"]["n_batch"]),
        adapt_strategy=config.adaptation_strategy(),
        noise=config.evaluation_noise(),
        literal_time_mean=bool(doc["evaluation"]["literal_time_mean"]),
        jobs=jobs,
        grid_resolution=int(doc["evaluation"]["grid_resolution"]),
        data_seed=int(doc["dataset"]["data_seed"]),
        validation_seed=int(doc["dataset"]["validation_seed"]),
    )


def _meta_train_config(config: RunConfig, seed: int):
    # the meta outer loop has its own iteration budget
    return config.train_config(method="meta", seed=seed)


def _load_datasets(data_dir: Path) -> MixedDataset:
    files = sorted(data_dir.glob("task_*.csv"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise ConfigError(f"no task_<id>.csv files in {data_dir}")
    return MixedDataset(datasets=[read_task_csv(f) for f in files])


def _write_history_csv(history: list[dict], path: Path) -> None:
    cols = ["iteration", "loss_lz", "loss_lx", "loss_ly", "alpha"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in history:
            writer.writerow([
                rec.get("iteration", ""),
                *("%.17g" % rec[c] if c in rec else "" for c in cols[1:]),
            ])


def _check_hash(meta: dict, config: RunConfig, force: bool, what: str) -> None:
    if force:
        return
    stored = meta.get("config_hash", "")
    if stored and stored != config.content_hash:
        raise ConfigError(
            f"{what} was produced under a different config "
            f"(hash {stored[:12]}... vs {config.content_hash[:12]}...); "
            "rerun with --force to override"
        )


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    config = RunConfig.from_file(args.config)
    seed = _resolve_seed(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = config.doc
    dist = config.distribution()
    model = duffing_model(dist.fixed_lambda)
    design = default_design(model.dx)
    bs_cfg = BackwardSamplingConfig(epsilon=float(doc["observer"]["epsilon"]),
                                    z_norm_bound=doc["observer"]["z_norm_bound"])
    dt = float(doc["dataset"]["dt"])
    n_steps = int(round(float(doc["dataset"]["t_train"]) / dt))
    tasks = make_training_tasks(dist, int(doc["dataset"]["n_train_tasks"]),
                                seed=int(doc["dataset"]["data_seed"]))
    noise = config.dataset_noise()
    for task in tasks:
        ds = generate_task_dataset(task, model, design, bs_cfg, dt, n_steps,
                                   noise=noise)
        write_task_csv(ds, out / f"task_{task.task_id}.csv")
    write_manifest(out / "manifest.json", config.doc,
                   {"seed": seed, "data_seed": int(doc["dataset"]["data_seed"])},
                   tasks)
    print(f"wrote {len(tasks)} task files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config)
    seed = _resolve_seed(args, config)
    data = _load_datasets(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = duffing_model(config.distribution().fixed_lambda)
    design = default_design(model.dx)
    method = args.method
    ckpt_kwargs = {"config_hash": config.content_hash, "seed": seed}

    if method == "parallel":
        cfg = config.train_config(method=method, seed=seed)
        theta, eta, history = train_parallel_mixed(data, cfg)
        save_checkpoint(theta, out / "theta.ckpt.json", **ckpt_kwargs)
        save_checkpoint(eta, out / "eta.ckpt.json", **ckpt_kwargs)
    elif method in ("sequential", "pinn"):
        cfg = config.train_config(method=method, seed=seed,
                                  pinn_weight=args.pinn_weight)
        theta, eta, history = train_sequential_mixed(data, cfg, model, design)
        save_checkpoint(theta, out / "theta.ckpt.json", **ckpt_kwargs)
        save_checkpoint(eta, out / "eta.ckpt.json", **ckpt_kwargs)
    else:
        par_cfg = config.train_config(method="parallel", seed=seed)
        theta, eta0, _ = train_parallel_mixed(data, par_cfg)
        mcfg = config.meta_config(first_order=args.first_order or None,
                                  pretrain=True if args.pretrain else None)
        meta_cfg = _meta_train_config(config, seed)
        state = train_meta(data, meta_cfg, mcfg, model,
                           eta_init=eta0 if mcfg.pretrain else None)
        history = state.history
        save_checkpoint(theta, out / "theta.ckpt.json", **ckpt_kwargs)
        save_checkpoint(eta0, out / "eta.ckpt.json", **ckpt_kwargs)
        save_checkpoint(state.eta, out / "meta.ckpt.json", alpha=state.alpha,
                        **ckpt_kwargs)
    _write_history_csv(history, out / "loss_history.csv")
    print(f"trained '{method}' (seed {seed}); checkpoints in {out}")
    return EXIT_OK


def _load_artifacts(ckpt_dir: Path, method: str, config: RunConfig,
                    force: bool) -> MethodArtifacts:
    theta, _, meta_t = load_checkpoint(ckpt_dir / "theta.ckpt.json")
    _check_hash(meta_t, config, force, "theta checkpoint")
    if method == "meta":
        path = ckpt_dir / "meta.ckpt.json"
        if not path.exists():
            raise ConfigError(f"experiment needs a meta checkpoint at {path}")
        eta, alpha, meta_m = load_checkpoint(path)
        if alpha is None:
            raise ConfigError("meta checkpoint carries no adaptation rate")
        _check_hash(meta_m, config, force, "meta checkpoint")
        return MethodArtifacts(method="meta", theta=theta, eta=eta, alpha=alpha,
                               seed=int(meta_m.get("seed", 0)))
    eta, _, meta_e = load_checkpoint(ckpt_dir / "eta.ckpt.json")
    _check_hash(meta_e, config, force, "eta checkpoint")
    return MethodArtifacts(method=method, theta=theta, eta=eta,
                           seed=int(meta_e.get("seed", 0)))


def cmd_eval(args) -> int:
    config = RunConfig.from_file(args.config)
    seed = _resolve_seed(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exp_config = _experiment_config(config, seed, args.jobs)
    seeds = [int(s) for s in config.doc["evaluation"]["seeds"]]
    methods = list(METHODS)

    if args.experiment == "lambda":
        report = run_experiment_lambda(methods, seeds, exp_config,
                                       config_hash=config.content_hash)
        write_results_csv(report, out / "results.csv")
        write_curves_csv(report, out / "curves.csv")
    elif args.experiment == "x0":
        report = run_experiment_x0(methods, seeds, exp_config,
                                   config_hash=config.content_hash)
        write_results_csv(report, out / "results_in.csv", variant="in-range")
        write_results_csv(report, out / "results_out.csv", variant="out-of-range")
        write_results_csv(report, out / "results_noisy.csv", variant="in-range-noisy")
        write_curves_csv(report, out / "curves.csv")
    elif args.experiment == "grid":
        artifacts = None
        if args.checkpoints is not None:
            artifacts = _load_artifacts(Path(args.checkpoints), args.method,
                                        config, args.force)
        grid, axes = error_profile_grid(args.method, seeds, exp_config,
                                        config_hash=config.content_hash,
                                        artifacts=artifacts)
        write_grid(grid, axes, out / "grid.csv", out / "grid_axes.json")
    else:  # sampling
        if args.checkpoints is None:
            raise ConfigError("--experiment sampling requires --checkpoints "
                              "with a trained meta checkpoint")
        artifacts = _load_artifacts(Path(args.checkpoints), "meta", config,
                                    args.force)
        report = run_experiment_sampling(list(STRATEGY_KINDS), seeds, exp_config,
                                         config_hash=config.content_hash,
                                         artifacts=artifacts)
        write_results_csv(report, out / "results.csv")
        write_curves_csv(report, out / "curves.csv")
    print(f"experiment '{args.experiment}' written to {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    config = RunConfig.from_file(args.config)
    seed = _resolve_seed(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = config.doc

    eta, alpha, meta_info = load_checkpoint(args.checkpoint)
    if alpha is None:
        raise ConfigError("adapt needs a meta checkpoint with an adaptation rate")
    _check_hash(meta_info, config, args.force, "meta checkpoint")
    ckpt_dir = Path(args.checkpoint).parent
    theta, _, meta_t = load_checkpoint(ckpt_dir / "theta.ckpt.json")
    _check_hash(meta_t, config, args.force, "theta checkpoint")

    dist = config.distribution()
    lam = float(args.task_lambda) if args.task_lambda is not None else dist.fixed_lambda
    if args.task_x0 is not None:
        x0 = np.array([float(v) for v in args.task_x0.split(",")])
    else:
        x0 = dist.fixed_x0
    task = Task(task_id=0, lam=lam, x0=x0)

    exp_config = _experiment_config(config, seed, args.jobs)
    model = duffing_model(lam)
    design = default_design(model.dx)
    delay = exp_config.transient_time(design)
    strategy = config.adaptation_strategy(args.strategy, default_delay=delay)

    horizon = (exp_config.sampling_horizon if strategy.kind.startswith("window")
               or strategy.delay > 0 else exp_config.t_eval)
    bs_cfg = BackwardSamplingConfig(epsilon=exp_config.epsilon)
    truth = generate_task_dataset(task, model, design, bs_cfg, exp_config.dt,
                                  int(round(horizon / exp_config.dt)))

    pre = MethodArtifacts(method="parallel", theta=theta, eta=eta, seed=seed)
    row_pre, _ = evaluate_on_task(pre, task, truth, model, design, exp_config, seed)
    post = MethodArtifacts(method="meta", theta=theta, eta=eta, alpha=alpha, seed=seed)
    exp_config = replace(exp_config, adapt_strategy=strategy)
    row_post, _ = evaluate_on_task(post, task, truth, model, design, exp_config, seed)

    z0_hat = predict(theta, task.x0[None, :])[0]
    z_traj = run_observer(design, z0_hat, truth.y, exp_config.dt)
    run = online_adapt(MethodArtifacts(method="meta", theta=theta, eta=eta,
                                       alpha=alpha).meta_state(),
                       z_traj, truth.y, strategy, exp_config.adapt_n_batch,
                       exp_config.meta.n_adapt, output_projection(model), seed=seed)
    save_checkpoint(run.eta_adapted, out / "eta_adapted.ckpt.json", alpha=alpha,
                    config_hash=config.content_hash, seed=seed)
    with (out / "adapt_report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "strategy", "lambda", "x0_1", "x0_2", "seed", "e_bar_t"])
        writer.writerow(["pre", strategy.kind, "%.17g" % lam, "%.17g" % x0[0],
                         "%.17g" % x0[1], str(seed), "%.17g" % row_pre["e_bar_t"]])
        writer.writerow(["post", strategy.kind, "%.17g" % lam, "%.17g" % x0[0],
                         "%.17g" % x0[1], str(seed), "%.17g" % row_post["e_bar_t"]])
    print(f"adaptation report written to {out} "
          f"(e_bar_t {row_pre['e_bar_t']:.4g} -> {row_post['e_bar_t']:.4g})")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "adapt": cmd_adapt,
    }
    try:
        return handlers[args.command](args)
    except (TrainingDiverged, SimulationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError,
            NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
