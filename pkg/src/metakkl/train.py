"""Losses, optimizers, and the four training algorithms.

Mixed-task methods fit the forward and inverse maps on the pooled task data:
the parallel method trains them independently against simulated labels, the
sequential method trains the inverse on the composition through the forward
map (optionally with a physics-informed residual on the forward map). The
meta method learns an inverse-map initialization and an adaptation rate such
that a few output-loss gradient steps specialize it to one task; its outer
update differentiates through those inner steps.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .data import MixedDataset
from .nn import MapParams, MlpSpec
from .observer import ObserverDesign
from .sim import SystemModel

__all__ = [
    "TrainConfig",
    "MetaConfig",
    "MetaState",
    "TrainingDiverged",
    "loss_Lz",
    "loss_Lx_parallel",
    "loss_Lx_sequential",
    "loss_Ly",
    "loss_pde_residual",
    "AdamState",
    "adam_step",
    "sgd_step",
    "output_projection",
    "train_parallel_mixed",
    "train_sequential_mixed",
    "train_meta",
    "meta_step_gradients",
]


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 256
    lr: float = 1e-3
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    seed: int = 0
    method: str = "parallel"  # parallel | sequential | pinn | meta
    pinn_weight: float = 1.0
    hidden: tuple[int, ...] = (50, 50, 50, 50, 50)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.method not in ("parallel", "sequential", "pinn", "meta"):
            raise ValueError(f"unknown method '{self.method}'")


@dataclass(frozen=True)
class MetaConfig:
    n_batch_meta: int = 4
    n_adapt: int = 5
    n_adapt_points: int = 32
    n_query_points: int = 256
    alpha_init: float = 1e-2
    first_order: bool = False
    pretrain: bool = True
    pretrain_epochs: int = 300

    def __post_init__(self):
        if self.n_batch_meta < 1:
            raise ValueError("n_batch_meta must be >= 1")
        if self.n_adapt < 0:
            raise ValueError("n_adapt must be >= 0")
        if self.alpha_init <= 0:
            raise ValueError("alpha_init must be > 0")


@dataclass
class MetaState:
    eta: MapParams
    alpha: float
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses (batch reduction is the mean over rows)


def _mean_sqnorm(residual: Value, n_rows: int) -> Value:
    return ad.smul(ad.sqnorm(residual), 1.0 / n_rows)


def _check_batch(*arrays):
    n = arrays[0].shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("batch rows not aligned")
    return n


def loss_Lz(z: np.ndarray, x: np.ndarray, fwd: MapParams,
            fwd_values: list[Value] | None = None) -> Value:
    """Mean squared residual of the forward map: z against F_theta(x)."""
    n = _check_batch(z, x)
    pred = nn.forward(fwd, x, values=fwd_values)
    return _mean_sqnorm(ad.sub(ad.value(z), pred), n)


def loss_Lx_parallel(x: np.ndarray, z: np.ndarray, inv: MapParams,
                     inv_values: list[Value] | None = None) -> Value:
    """Mean squared residual of the inverse map on simulated latent labels."""
    n = _check_batch(x, z)
    pred = nn.forward(inv, z, values=inv_values)
    return _mean_sqnorm(ad.sub(ad.value(x), pred), n)


def loss_Lx_sequential(x: np.ndarray, fwd: MapParams, inv: MapParams,
                       fwd_values: list[Value] | None = None,
                       inv_values: list[Value] | None = None) -> Value:
    """Mean squared residual of the composed reconstruction x -> z_hat -> x_hat."""
    n = _check_batch(x)
    z_hat = nn.forward(fwd, x, values=fwd_values)
    x_hat = nn.forward(inv, z_hat, values=inv_values)
    return _mean_sqnorm(ad.sub(ad.value(x), x_hat), n)


def loss_Ly(y: np.ndarray, z, inv: MapParams, h: Callable[[Value], Value],
            inv_values: list[Value] | None = None) -> Value:
    """Mean squared output residual: y against h(F_inv(z)).

    `z` may be an array (dataset labels) or a recorded Value; `h` must be a
    graph-differentiable realization of the output map.
    """
    y = np.asarray(y, dtype=np.float64)
    n = _check_batch(y, z.data if isinstance(z, Value) else np.asarray(z))
    x_hat = nn.forward(inv, z, values=inv_values)
    return _mean_sqnorm(ad.sub(ad.value(y), h(x_hat)), n)


def output_projection(model: SystemModel) -> Callable[[Value], Value]:
    """Graph realization of the output map; supports coordinate projections."""
    probe = np.zeros(model.dx)
    cols = []
    for j in range(model.dx):
        e = np.zeros(model.dx)
        e[j] = 1.0
        cols.append(model.output(e) - model.output(probe))
    matrix = np.stack(cols, axis=0)  # (dx, dy)
    offset = model.output(probe)
    if np.any(offset != 0.0):
        raise ValueError("output map is not linear; provide a custom graph version")
    return lambda x_hat: ad.matmul(x_hat, ad.value(matrix))


def loss_pde_residual(x: np.ndarray, fwd: MapParams, model: SystemModel,
                      design: ObserverDesign,
                      fwd_values: list[Value] | None = None,
                      fd_eps: float = 1e-6) -> Value:
    """Mean squared residual of the observer PDE at the batch points.

    The Jacobian-vector product (dF/dx) f(x) is taken as the central
    difference of the recorded forward pass along the flow direction, so the
    loss stays differentiable w.r.t. the map parameters.
    """
    n = _check_batch(x)
    f_x = np.stack([model.rhs(row, model.param) for row in x])
    y_x = np.stack([model.output(row) for row in x])
    fhat = nn.forward(fwd, x, values=fwd_values)
    plus = nn.forward(fwd, x + fd_eps * f_x, values=fwd_values)
    minus = nn.forward(fwd, x - fd_eps * f_x, values=fwd_values)
    jvp = ad.smul(ad.sub(plus, minus), 1.0 / (2.0 * fd_eps))
    decay = ad.mul(fhat, ad.value(design.a_diag))
    forcing = np.sum(y_x, axis=1, keepdims=True) @ np.atleast_2d(design.b)
    residual = ad.sub(ad.sub(jvp, decay), ad.value(forcing))
    return _mean_sqnorm(residual, n)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, hyper: tuple[float, float, float] = (0.9, 0.999, 1e-8)
              ) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected adaptive-moment update; returns new params and state."""
    b1, b2, eps = hyper
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    return [p - lr * g for p, g in zip(params, grads)]


# ---------------------------------------------------------------------------
# mixed-task training


def _minibatches(n_rows: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n_rows)
    for start in range(0, n_rows, batch_size):
        yield perm[start:start + batch_size]


def _check_finite_loss(value: float, what: str, iteration: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} loss became non-finite at iteration {iteration}")


def _fit_map(inputs: np.ndarray, targets: np.ndarray, spec: MlpSpec, epochs: int,
             cfg: TrainConfig, seed_stream: int, what: str) -> tuple[MapParams, list[float]]:
    """Adam regression of one map on mixed rows; returns params and loss history."""
    rng = np.random.default_rng([cfg.seed, seed_stream])
    params = nn.init_params(spec, seed=int(rng.integers(2**31)))
    params = nn.fit_normalization(params, inputs, targets)
    arrays = nn.param_arrays(params)
    state = AdamState.init(arrays)
    history = []
    n = inputs.shape[0]
    for epoch in range(epochs):
        epoch_losses = []
        for idx in _minibatches(n, cfg.batch_size, rng):
            params = nn.with_arrays(params, arrays)
            values = nn.value_params(params)
            loss = loss_Lz(targets[idx], inputs[idx], params, fwd_values=values)
            grads = [g.data for g in ad.grad(loss, values)]
            arrays, state = adam_step(arrays, grads, state, cfg.lr, cfg.adam)
            epoch_losses.append(loss.item())
        mean_loss = float(np.mean(epoch_losses))
        _check_finite_loss(mean_loss, what, epoch)
        history.append(mean_loss)
    return nn.with_arrays(params, arrays), history


def train_parallel_mixed(data: MixedDataset, cfg: TrainConfig,
                         eta_seed: int | None = None
                         ) -> tuple[MapParams, MapParams, list[dict]]:
    """Independent regressions: forward map on (x -> z), inverse on (z -> x).

    The two loops consume separate seeded streams, so retraining one map
    (even under `eta_seed` overrides) cannot perturb the other.
    """
    x, z = data.x_all, data.z_all
    dx, dz = x.shape[1], z.shape[1]
    theta, hist_z = _fit_map(x, z, MlpSpec(dx, dz, cfg.hidden), cfg.epochs, cfg,
                             seed_stream=0, what="forward-map")
    eta_cfg = cfg if eta_seed is None else TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, adam=cfg.adam,
        seed=eta_seed, method=cfg.method, pinn_weight=cfg.pinn_weight, hidden=cfg.hidden)
    eta, hist_x = _fit_map(z, x, MlpSpec(dz, dx, cfg.hidden), cfg.epochs, eta_cfg,
                           seed_stream=1, what="inverse-map")
    history = [{"iteration": i, "loss_lz": lz, "loss_lx": lx}
               for i, (lz, lx) in enumerate(zip(hist_z, hist_x))]
    return theta, eta, history


def train_sequential_mixed(data: MixedDataset, cfg: TrainConfig,
                           model: SystemModel | None = None,
                           design: ObserverDesign | None = None
                           ) -> tuple[MapParams, MapParams, list[dict]]:
    """Joint loop: theta on composed-reconstruction + latent losses (optionally
    plus the PDE residual), eta on the composed-reconstruction loss."""
    use_pinn = cfg.method == "pinn" and cfg.pinn_weight != 0.0
    if use_pinn and (model is None or design is None):
        raise ValueError("pinn training needs the system model and observer design")
    x, z = data.x_all, data.z_all
    dx, dz = x.shape[1], z.shape[1]
    rng = np.random.default_rng([cfg.seed, 0])
    theta = nn.init_params(MlpSpec(dx, dz, cfg.hidden), seed=int(rng.integers(2**31)))
    theta = nn.fit_normalization(theta, x, z)
    eta = nn.init_params(MlpSpec(dz, dx, cfg.hidden), seed=int(rng.integers(2**31)))
    eta = nn.fit_normalization(eta, z, x)
    theta_arrays = nn.param_arrays(theta)
    eta_arrays = nn.param_arrays(eta)
    state_t = AdamState.init(theta_arrays)
    state_e = AdamState.init(eta_arrays)
    history = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lz_epoch, lx_epoch = [], []
        for idx in _minibatches(n, cfg.batch_size, rng):
            theta = nn.with_arrays(theta, theta_arrays)
            eta = nn.with_arrays(eta, eta_arrays)
            tv = nn.value_params(theta)
            ev = nn.value_params(eta)
            xb, zb = x[idx], z[idx]
            lz = loss_Lz(zb, xb, theta, fwd_values=tv)
            lx = loss_Lx_sequential(xb, theta, eta, fwd_values=tv, inv_values=ev)
            theta_loss = ad.add(lx, lz)
            if use_pinn:
                pde = loss_pde_residual(xb, theta, model, design, fwd_values=tv)
                theta_loss = ad.add(theta_loss, ad.smul(pde, cfg.pinn_weight))
            g_theta = [g.data for g in ad.grad(theta_loss, tv)]
            g_eta = [g.data for g in ad.grad(lx, ev)]
            theta_arrays, state_t = adam_step(theta_arrays, g_theta, state_t, cfg.lr, cfg.adam)
            eta_arrays, state_e = adam_step(eta_arrays, g_eta, state_e, cfg.lr, cfg.adam)
            lz_epoch.append(lz.item())
            lx_epoch.append(lx.item())
        mean_lz, mean_lx = float(np.mean(lz_epoch)), float(np.mean(lx_epoch))
        _check_finite_loss(mean_lz + mean_lx, "sequential", epoch)
        history.append({"iteration": epoch, "loss_lz": mean_lz, "loss_lx": mean_lx})
    return nn.with_arrays(theta, theta_arrays), nn.with_arrays(eta, eta_arrays), history


# ---------------------------------------------------------------------------
# meta-learning for system-output adaptation


def meta_step_gradients(eta: MapParams, log_alpha: float,
                        task_batches: list[dict], h: Callable[[Value], Value],
                        n_adapt: int, first_order: bool
                        ) -> tuple[list[np.ndarray], float, float, float]:
    """One outer-loop gradient evaluation of the meta objective.

    `task_batches` carries, per task, the adaptation batches (y_a, z_a) for
    each inner step and one query batch (x_q, z_q). Returns (gradients for
    [eta arrays..., log_alpha], summed query loss, mean inner output loss,
    alpha). Inner updates are plain gradient steps on the output loss; with
    `first_order` their gradients are detached from the outer graph.
    """
    eta_values = nn.value_params(eta)
    log_alpha_value = ad.value(np.asarray(log_alpha), requires_grad=True)
    alpha_value = ad.vexp(log_alpha_value)
    total_query: Value | None = None
    inner_losses = []
    for batches in task_batches:
        eta_i = eta_values
        for y_a, z_a in batches["adapt"]:
            ly = loss_Ly(y_a, z_a, eta, h, inv_values=eta_i)
            inner_losses.append(ly.item())
            grads = ad.grad(ly, eta_i, create_graph=not first_order)
            if first_order:
                grads = [g.detach() for g in grads]
            eta_i = [ad.sub(p, ad.mul(alpha_value, g)) for p, g in zip(eta_i, grads)]
        x_q, z_q = batches["query"]
        lq = loss_Lx_parallel(x_q, z_q, eta, inv_values=eta_i)
        total_query = lq if total_query is None else ad.add(total_query, lq)
    grads = ad.grad(total_query, eta_values + [log_alpha_value])
    g_arrays = [g.data for g in grads]
    mean_inner = float(np.mean(inner_losses)) if inner_losses else float("nan")
    return g_arrays, total_query.item(), mean_inner, float(alpha_value.data)


def train_meta(data: MixedDataset, cfg: TrainConfig, mcfg: MetaConfig,
               model: SystemModel, eta_init: MapParams | None = None) -> MetaState:
    """Meta-learning for system-output adaptation over the cached task pool.

    Outer iterations sample tasks from `data` (the fixed training pool, so
    every method sees the same training data), run `n_adapt` output-loss
    gradient steps on task-local parameters, and update the shared inverse
    map and the adaptation rate through those steps with Adam. The rate is
    kept positive through an exponential parameterization.

    `eta_init` supplies an already pre-trained inverse map (the usual
    protocol: the one from a parallel mixed-task run); otherwise a fresh
    pretraining pass runs when `mcfg.pretrain` is set.
    """
    x_all, z_all = data.x_all, data.z_all
    dz, dx = z_all.shape[1], x_all.shape[1]
    rng = np.random.default_rng([cfg.seed, 2])
    if eta_init is not None:
        eta = eta_init.copy()
    elif mcfg.pretrain:
        pre_cfg = TrainConfig(epochs=mcfg.pretrain_epochs, batch_size=cfg.batch_size,
                              lr=cfg.lr, adam=cfg.adam, seed=cfg.seed, method="parallel",
                              hidden=cfg.hidden)
        eta, _ = _fit_map(z_all, x_all, MlpSpec(dz, dx, cfg.hidden),
                          mcfg.pretrain_epochs, pre_cfg, seed_stream=1,
                          what="inverse-map-pretrain")
    else:
        eta = nn.init_params(MlpSpec(dz, dx, cfg.hidden), seed=int(rng.integers(2**31)))
        eta = nn.fit_normalization(eta, z_all, x_all)

    h = output_projection(model)
    h_numpy = lambda xs: np.stack([model.output(row) for row in xs])  # noqa: E731
    log_alpha = float(np.log(mcfg.alpha_init))
    arrays = nn.param_arrays(eta) + [np.asarray(log_alpha)]
    state = AdamState.init(arrays)
    history = []
    n_tasks = len(data.datasets)
    needed = mcfg.n_adapt * mcfg.n_adapt_points
    for it in range(cfg.epochs):
        task_batches = []
        for _ in range(mcfg.n_batch_meta):
            ds = data.datasets[int(rng.integers(n_tasks))]
            rows = len(ds)
            if rows <= needed:
                raise ValueError(
                    f"task dataset has {rows} rows; need more than "
                    f"{needed} for {mcfg.n_adapt} x {mcfg.n_adapt_points} adaptation samples"
                )
            perm = rng.permutation(rows)
            adapt = []
            for j in range(mcfg.n_adapt):
                idx = perm[j * mcfg.n_adapt_points:(j + 1) * mcfg.n_adapt_points]
                adapt.append((h_numpy(ds.x[idx]), ds.z[idx]))
            q_idx = perm[needed:needed + mcfg.n_query_points]
            task_batches.append({
                "adapt": adapt,
                "query": (ds.x[q_idx], ds.z[q_idx]),
            })
        eta = nn.with_arrays(eta, arrays[:-1])
        g_arrays, query_loss, inner_loss, alpha = meta_step_gradients(
            eta, float(arrays[-1]), task_batches, h, mcfg.n_adapt, mcfg.first_order)
        _check_finite_loss(query_loss, "meta", it)
        arrays, state = adam_step(arrays, g_arrays, state, cfg.lr, cfg.adam)
        if math.exp(float(arrays[-1])) < 1e-10:
            warnings.warn("adaptation rate collapsed below 1e-10")
        history.append({"iteration": it, "loss_lx": query_loss,
                        "loss_ly": inner_loss, "alpha": alpha})
    eta = nn.with_arrays(eta, arrays[:-1])
    return MetaState(eta=eta, alpha=float(math.exp(float(arrays[-1]))), history=history)
