"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Experiment-scale criteria (6-9) run at desk scale: scaled-down validation
set sizes, medians over 5 seeds, qualitative-ordering assertions. Shared
training runs are cached in session fixtures so the suite stays inside the
stated runtime budgets.
"""

import time

import numpy as np
import pytest

from metakkl import autodiff as ad
from metakkl import nn
from metakkl.data import (
    MixedDataset,
    Task,
    TaskDistribution,
    generate_task_dataset,
    make_training_tasks,
    make_validation_tasks,
)
from metakkl.evaluation import (
    ExperimentConfig,
    MethodArtifacts,
    evaluate_on_task,
    normalized_error,
    run_experiment_lambda,
    run_experiment_sampling,
    run_experiment_x0,
    time_mean_error,
    train_method,
    write_curves_csv,
    write_results_csv,
)
from metakkl.nn import MlpSpec, init_params
from metakkl.observer import (
    BackwardSamplingConfig,
    backward_sample_init,
    default_design,
    observer_residual,
    run_observer,
)
from metakkl.sim import SimGrid, duffing_model, output_samples, simulate
from metakkl.train import (
    MetaConfig,
    TrainConfig,
    loss_Ly,
    loss_Lz,
    output_projection,
    train_parallel_mixed,
)

SEEDS = [0, 1, 2, 3, 4]


def report(criterion: str, passed: bool, detail: str, t0: float):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{status}] {criterion}: {detail} ({time.time() - t0:.1f}s)")
    assert passed, f"{criterion}: {detail}"


# -- shared experiment fixtures ----------------------------------------------


def lambda_config(**overrides) -> ExperimentConfig:
    base = dict(
        dist=TaskDistribution(kind="lambda-variation", fixed_x0=np.array([0.5, 0.5])),
        train=TrainConfig(epochs=400, batch_size=256, seed=0, lr=1e-3),
        meta=MetaConfig(pretrain=True, n_batch_meta=4, n_adapt=5,
                        n_adapt_points=32, n_query_points=256, alpha_init=1e-2),
        meta_epochs=1200,
        n_train_tasks=5,
        n_validation=50,
        jobs=2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def x0_config(**overrides) -> ExperimentConfig:
    base = dict(
        dist=TaskDistribution(kind="x0-variation", fixed_lambda=1.0),
        train=TrainConfig(epochs=400, batch_size=256, seed=0, lr=1e-3),
        meta=MetaConfig(pretrain=True, n_batch_meta=4, n_adapt=5,
                        n_adapt_points=32, n_query_points=256, alpha_init=1e-2),
        meta_epochs=1200,
        n_train_tasks=20,
        n_validation=20,
        n_out_of_range=20,
        jobs=2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def lambda_report():
    config = lambda_config()
    return run_experiment_lambda(["parallel", "sequential", "meta"], SEEDS, config), config


@pytest.fixture(scope="session")
def x0_report():
    config = x0_config()
    return run_experiment_x0(["parallel", "sequential", "pinn", "meta"], SEEDS,
                             config), config


@pytest.fixture(scope="session")
def x0_meta_artifacts():
    config = x0_config()
    model = duffing_model(config.dist.fixed_lambda)
    design = default_design(model.dx)
    tasks = make_training_tasks(config.dist, config.n_train_tasks, seed=config.data_seed)
    bs_cfg = BackwardSamplingConfig(epsilon=config.epsilon)
    datasets = [generate_task_dataset(t, model, design, bs_cfg, config.dt,
                                      int(round(config.t_train / config.dt)))
                for t in tasks]
    mixed = MixedDataset(datasets=datasets)
    artifacts = train_method("meta", mixed, config.train, config.meta, model,
                             design, seed=0, meta_epochs=config.meta_epochs)
    return artifacts, config


# -- criteria -----------------------------------------------------------------


def test_criterion_1_integrator_correctness():
    t0 = time.time()
    model = duffing_model(1.0)
    x0 = np.array([0.5, 0.5])
    traj = simulate(model, x0, SimGrid(0.0, 0.01, 5000))
    c = 0.5 * traj.states[:, 0] ** 2 + 0.25 * traj.states[:, 1] ** 4
    drift = float(np.max(np.abs(c - c[0])))

    ref = simulate(model, x0, SimGrid(0.0, 1.0 / 6400, 6400)).states[-1]
    errs = [np.linalg.norm(simulate(model, x0, SimGrid(0.0, 1.0 / n, n)).states[-1] - ref)
            for n in (100, 200)]
    order = float(np.log2(errs[0] / errs[1]))

    passed = drift < 1e-6 and 3.8 <= order <= 4.2
    report("criterion 1 (integrator)", passed,
           f"invariant drift {drift:.2e} (<1e-6), RK4 order {order:.3f} in [3.8,4.2]", t0)


def test_criterion_2_backward_sampling():
    t0 = time.time()
    model = duffing_model(1.0)
    design = default_design(2)
    eps = 1e-6
    bound = 2.0
    cfg = BackwardSamplingConfig(epsilon=eps, z_norm_bound=bound)
    x0 = np.array([0.5, 0.5])
    z0_zero, x_traj, _ = backward_sample_init(model, design, x0, cfg, dt=0.01)
    y = output_samples(model, x_traj.states)
    rng = np.random.default_rng(0)
    z_tau = rng.normal(size=5)
    z_tau *= bound / np.linalg.norm(z_tau)
    z0_rand = run_observer(design, z_tau, y, 0.01, t0=x_traj.times[0]).states[-1]
    init_diff = float(np.linalg.norm(z0_zero - z0_rand))

    resid = 0.0
    for lam, start in ((1.0, [0.5, 0.5]), (3.0, [-0.4, 0.8])):
        task = Task(task_id=0, lam=lam, x0=np.array(start))
        ds = generate_task_dataset(task, model, design,
                                   BackwardSamplingConfig(epsilon=eps),
                                   dt=0.01, n_steps=1000)
        resid = max(resid, observer_residual(design, ds.z, ds.y, 0.01))

    passed = init_diff < 2 * eps and resid < 1e-3
    report("criterion 2 (backward sampling)", passed,
           f"z(0) init sensitivity {init_diff:.2e} (<2e-6), "
           f"observer residual {resid:.2e} (<1e-3)", t0)


def test_criterion_3_autodiff():
    t0 = time.time()
    # smooth ops: rel err < 1e-6
    rng = np.random.default_rng(1)
    smooth_ok = True
    for build in (lambda v: ad.sqnorm(v),
                  lambda v: ad.vmean(ad.square(v)),
                  lambda v: ad.vsum(ad.mul(v, v)),
                  lambda v: ad.vsum(ad.vexp(ad.smul(v, 0.2)))):
        r = ad.finite_diff_check(build, ad.value(rng.normal(size=(3, 2))), tol=1e-6)
        smooth_ok = smooth_ok and r.passed

    # full default-architecture MLP loss: rel err < 1e-4 on sampled coordinates
    fwd = init_params(MlpSpec(2, 5), seed=0)
    x = rng.normal(size=(8, 2))
    z = rng.normal(size=(8, 5))
    values = nn.value_params(fwd)
    grads = ad.grad(loss_Lz(z, x, fwd, fwd_values=values), values)
    arrays = nn.param_arrays(fwd)
    mlp_max = 0.0
    h = 1e-6
    for k in range(len(arrays)):
        flat = arrays[k].ravel()
        gflat = grads[k].data.ravel()
        for idx in range(0, flat.size, max(1, flat.size // 8)):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_Lz(z, x, fwd).item()
            flat[idx] = orig - h
            dn = loss_Lz(z, x, fwd).item()
            flat[idx] = orig
            fd = (up - dn) / (2 * h)
            mlp_max = max(mlp_max, abs(fd - gflat[idx]) / max(1.0, abs(fd)))

    # second order: closed-form scalar oracle to 1e-10
    eta = ad.value(1.0, requires_grad=True)
    alpha = ad.value(0.1, requires_grad=True)
    (g_in,) = ad.grad(ad.square(eta), [eta], create_graph=True)
    outer = ad.square(ad.sub(eta, ad.mul(alpha, g_in)))
    g_eta, g_alpha = ad.grad(outer, [eta, alpha])
    scalar_err = max(abs(g_eta.item() - 1.28), abs(g_alpha.item() - (-3.2)))

    # second order: 1-hidden-unit network vs finite differences of the meta loss
    def tiny(params, xv, tv):
        hdn = ad.relu(ad.add(ad.matmul(xv, params[0], transpose_b=True), params[1]))
        out = ad.add(ad.matmul(hdn, params[2], transpose_b=True), params[3])
        return ad.smul(ad.sqnorm(ad.sub(out, tv)), 0.25)

    shapes = [(1, 2), (1,), (1, 1), (1,)]
    theta0 = [rng.normal(size=s) * 0.5 + 0.4 for s in shapes]
    xv = ad.value(rng.normal(size=(4, 2)) + 0.6)
    tv = ad.value(rng.normal(size=(4, 1)))

    def meta_loss(flat):
        params, off = [], 0
        out = []
        for s in shapes:
            n = int(np.prod(s))
            out.append(ad.value(flat[off:off + n].reshape(s), requires_grad=True))
            off += n
        inner = tiny(out, xv, tv)
        gs = ad.grad(inner, out, create_graph=True)
        adapted = [ad.sub(p, ad.smul(g, 0.05)) for p, g in zip(out, gs)]
        return tiny(adapted, xv, tv), out

    flat0 = np.concatenate([a.ravel() for a in theta0])
    outer_v, leaves = meta_loss(flat0)
    g_ad = np.concatenate([g.data.ravel() for g in ad.grad(outer_v, leaves)])
    second_max = 0.0
    for i in range(flat0.size):
        up_f, dn_f = flat0.copy(), flat0.copy()
        up_f[i] += h
        dn_f[i] -= h
        fd = (meta_loss(up_f)[0].item() - meta_loss(dn_f)[0].item()) / (2 * h)
        second_max = max(second_max, abs(fd - g_ad[i]) / max(1.0, abs(fd)))

    passed = smooth_ok and mlp_max < 1e-4 and scalar_err < 1e-10 and second_max < 1e-3
    report("criterion 3 (autodiff)", passed,
           f"smooth ops ok={smooth_ok}, MLP loss max rel {mlp_max:.2e} (<1e-4), "
           f"scalar meta-gradient err {scalar_err:.2e} (<1e-10), "
           f"net meta-gradient rel {second_max:.2e} (<1e-3)", t0)


def test_criterion_4_metric_identities():
    t0 = time.time()
    rng = np.random.default_rng(2)
    truth = rng.normal(size=4) + 3.0
    est = truth + rng.normal(size=4) * 0.1
    exact_zero = normalized_error(truth, truth) == 0.0
    nonzero = normalized_error(truth, est) > 0.0
    scale = abs(normalized_error(2.5 * truth, 2.5 * est)
                - normalized_error(truth, est)) < 1e-12
    c, n1 = 0.3, 8
    literal = abs(time_mean_error(np.full(n1, c)) - c * n1 / (n1 - 1)) < 1e-15
    passed = exact_zero and nonzero and scale and literal
    report("criterion 4 (metrics)", passed,
           f"zero-iff-exact={exact_zero and nonzero}, scale invariance={scale}, "
           f"literal time-mean={literal}", t0)


def test_criterion_5_single_task_learning():
    t0 = time.time()
    config = lambda_config(n_train_tasks=1, n_validation=1,
                           train=TrainConfig(epochs=600, batch_size=256, seed=0))
    dist = TaskDistribution(kind="lambda-variation", lambda_range=(1.0, 1.0001),
                            fixed_x0=np.array([0.5, 0.5]))
    model = duffing_model(1.0)
    design = default_design(2)
    task = Task(task_id=0, lam=1.0, x0=np.array([0.5, 0.5]))
    bs_cfg = BackwardSamplingConfig(epsilon=config.epsilon)
    train_ds = generate_task_dataset(task, model, design, bs_cfg, config.dt,
                                     int(round(config.t_train / config.dt)))
    mixed = MixedDataset(datasets=[train_ds])
    theta, eta, _ = train_parallel_mixed(mixed, config.train)
    artifacts = MethodArtifacts(method="parallel", theta=theta, eta=eta, seed=0)
    truth = generate_task_dataset(task, model, design, bs_cfg, config.dt,
                                  int(round(config.t_eval / config.dt)))
    row, _ = evaluate_on_task(artifacts, task, truth, model, design, config, seed=0)
    passed = row["e_bar_t"] < 0.05
    report("criterion 5 (single-task learning)", passed,
           f"post-transient e_bar_t {row['e_bar_t']:.4f} (<0.05)", t0)


def test_criterion_6_lambda_ordering(lambda_report):
    t0 = time.time()
    rep, config = lambda_report
    med = {m: rep.median_over_seeds(m) for m in ("meta", "parallel", "sequential")}
    passed = med["meta"] < med["parallel"] < med["sequential"]
    report("criterion 6 (lambda ordering)", passed,
           f"median e_bar_t meta {med['meta']:.4f} < parallel {med['parallel']:.4f} "
           f"< sequential {med['sequential']:.4f} over {len(SEEDS)} seeds, "
           f"{config.n_validation} validation tasks", t0)


def test_criterion_7_x0_ordering(x0_report):
    t0 = time.time()
    rep, config = x0_report
    methods = ("parallel", "sequential", "pinn", "meta")
    med_in = {m: rep.median_over_seeds(m, variant="in-range") for m in methods}
    med_out = {m: rep.median_over_seeds(m, variant="out-of-range") for m in methods}
    med_noisy = {m: rep.median_over_seeds(m, variant="in-range-noisy") for m in methods}
    in_ok = all(med_in["meta"] <= med_in[m] for m in methods)
    out_ok = (med_out["meta"] < med_out["sequential"]
              and med_out["meta"] < med_out["pinn"])
    noisy_ok = all(np.isfinite(list(med_noisy.values())))
    passed = in_ok and out_ok and noisy_ok
    report("criterion 7 (x0 ordering)", passed,
           f"in-range medians {({m: round(v, 4) for m, v in med_in.items()})} "
           f"(meta lowest: {in_ok}); out-of-range meta {med_out['meta']:.4f} vs "
           f"sequential {med_out['sequential']:.4f}, pinn {med_out['pinn']:.4f} "
           f"({out_ok}); noisy finite: {noisy_ok}", t0)


def test_criterion_8_sampling_ordering(x0_meta_artifacts):
    t0 = time.time()
    artifacts, config = x0_meta_artifacts
    strategies = ["minimum", "minimum-delayed", "window-random",
                  "window-random-delayed"]
    rep = run_experiment_sampling(strategies, SEEDS, config, artifacts=artifacts)
    med = {s: rep.median_over_seeds("meta", strategy=s) for s in strategies}
    worst = max(med, key=med.get)
    best_two = sorted(med, key=med.get)[:2]
    passed = (worst == "minimum"
              and set(best_two) == {"minimum-delayed", "window-random-delayed"})
    report("criterion 8 (sampling ordering)", passed,
           f"medians {({s: round(v, 4) for s, v in med.items()})}; worst={worst}, "
           f"best two={best_two}", t0)


def test_criterion_9_adaptation_utility(lambda_report):
    t0 = time.time()
    _, config = lambda_report
    model = duffing_model(config.dist.fixed_lambda)
    design = default_design(model.dx)
    tasks = make_training_tasks(config.dist, config.n_train_tasks, seed=config.data_seed)
    bs_cfg = BackwardSamplingConfig(epsilon=config.epsilon)
    datasets = [generate_task_dataset(t, model, design, bs_cfg, config.dt,
                                      int(round(config.t_train / config.dt)))
                for t in tasks]
    mixed = MixedDataset(datasets=datasets)
    artifacts = train_method("meta", mixed, config.train, config.meta, model,
                             design, seed=0, meta_epochs=config.meta_epochs)
    meta_state = artifacts.meta_state()
    h = output_projection(model)
    from metakkl.adapt import SamplingStrategy, online_adapt
    from metakkl.nn import predict

    val_tasks = make_validation_tasks(config.dist, "in-range", config.n_validation,
                                      seed=config.validation_seed)
    n_steps = int(round(config.t_eval / config.dt))
    improved = 0
    for task in val_tasks:
        truth = generate_task_dataset(task, duffing_model(task.lam), design, bs_cfg,
                                      config.dt, n_steps)
        z0_hat = predict(artifacts.theta, task.x0[None, :])[0]
        z_traj = run_observer(design, z0_hat, truth.y, config.dt)
        run = online_adapt(meta_state, z_traj, truth.y, SamplingStrategy("minimum"),
                           config.adapt_n_batch, config.meta.n_adapt, h,
                           seed=task.task_id)
        # disjoint query window: the post-transient stretch of the run
        q = truth.times >= config.transient_time(design)
        before = loss_Ly(truth.y[q], z_traj.states[q], meta_state.eta, h).item()
        after = loss_Ly(truth.y[q], z_traj.states[q], run.eta_adapted, h).item()
        improved += after < before
    frac = improved / len(val_tasks)
    passed = frac >= 0.9
    report("criterion 9 (adaptation utility)", passed,
           f"online adaptation reduced query output loss on {improved}/{len(val_tasks)} "
           f"validation tasks ({frac:.0%}, need >=90%)", t0)


def test_criterion_10_reproducibility(tmp_path):
    t0 = time.time()
    config = lambda_config(
        train=TrainConfig(epochs=5, batch_size=128, seed=0, hidden=(8, 8)),
        meta=MetaConfig(pretrain=True, pretrain_epochs=3, n_batch_meta=2,
                        n_adapt=2, n_adapt_points=8, n_query_points=16),
        meta_epochs=5,
        n_validation=2,
        t_train=4.0,
        t_eval=6.0,
        transient=2.0,
        jobs=2,
    )
    files = []
    for run_dir in ("a", "b"):
        rep = run_experiment_lambda(["parallel", "meta"], [0, 1], config)
        d = tmp_path / run_dir
        d.mkdir()
        write_results_csv(rep, d / "results.csv")
        write_curves_csv(rep, d / "curves.csv")
        files.append(d)
    same = all((files[0] / n).read_bytes() == (files[1] / n).read_bytes()
               for n in ("results.csv", "curves.csv"))
    report("criterion 10 (reproducibility)", same,
           "rerun with identical seeds produced byte-identical CSV outputs", t0)
