"""Feedforward approximators for the transformation map and its inverse.

Architecture: 5 hidden layers of 50 relu units plus dataset-statistics
normalization, realized as an affine standardization of inputs and
de-standardization of outputs. The forward pass can run on the autodiff tape
(training, input gradients) or as plain numpy (`predict`); both paths use
identical arithmetic so results match bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Value

__all__ = [
    "MlpSpec",
    "MapParams",
    "init_params",
    "fit_normalization",
    "value_params",
    "forward",
    "predict",
    "param_arrays",
    "with_arrays",
    "param_count",
]

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    hidden: tuple[int, ...] = (50, 50, 50, 50, 50)
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation '{self.activation}'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) shape of each weight matrix."""
        dims = (self.in_dim,) + self.hidden + (self.out_dim,)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass
class MapParams:
    """Weights, biases, and the normalization statistics of one map."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm_in: tuple[np.ndarray, np.ndarray]   # (mean, std) over inputs
    norm_out: tuple[np.ndarray, np.ndarray]  # (mean, std) over outputs

    def copy(self) -> "MapParams":
        return MapParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            norm_in=(self.norm_in[0].copy(), self.norm_in[1].copy()),
            norm_out=(self.norm_out[0].copy(), self.norm_out[1].copy()),
        )


def param_count(spec: MlpSpec) -> int:
    return sum(o * i + o for o, i in spec.layer_dims())


def init_params(spec: MlpSpec, seed: int) -> MapParams:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, identity norm."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in spec.layer_dims():
        bound = np.sqrt(6.0 / in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return MapParams(
        spec=spec,
        weights=weights,
        biases=biases,
        norm_in=(np.zeros(spec.in_dim), np.ones(spec.in_dim)),
        norm_out=(np.zeros(spec.out_dim), np.ones(spec.out_dim)),
    )


def _column_stats(data: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    mean = np.mean(data, axis=0)
    std = np.std(data, axis=0)  # population convention
    if np.any(std < STD_FLOOR):
        warnings.warn(f"zero-variance {what} column; std floored at {STD_FLOOR:g}")
        std = np.maximum(std, STD_FLOOR)
    return mean, std


def fit_normalization(params: MapParams, inputs: np.ndarray, outputs: np.ndarray) -> MapParams:
    """Set normalization statistics from data (per-column mean and std)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    if inputs.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit normalization")
    if inputs.shape[1] != params.spec.in_dim or outputs.shape[1] != params.spec.out_dim:
        raise ValueError("normalization data does not match spec dimensions")
    out = params.copy()
    out.norm_in = _column_stats(inputs, "input")
    out.norm_out = _column_stats(outputs, "output")
    return out


def value_params(params: MapParams, requires_grad: bool = True) -> list[Value]:
    """Leaves for the tape, ordered [W0, b0, W1, b1, ...]."""
    vals = []
    for w, b in zip(params.weights, params.biases):
        vals.append(ad.value(w, requires_grad=requires_grad))
        vals.append(ad.value(b, requires_grad=requires_grad))
    return vals


def forward(params: MapParams, x, values: list[Value] | None = None) -> Value:
    """Recorded forward pass; differentiate w.r.t. parameters and/or input.

    `values` substitutes the weight/bias leaves (training and inner-loop
    adapted parameters); normalization statistics always come from `params`.
    """
    xv = x if isinstance(x, Value) else ad.value(x)
    if xv.data.ndim != 2 or xv.data.shape[1] != params.spec.in_dim:
        raise ValueError(
            f"input must be (n, {params.spec.in_dim}), got {xv.data.shape}"
        )
    if values is None:
        values = value_params(params, requires_grad=False)
    mean_in, std_in = params.norm_in
    mean_out, std_out = params.norm_out
    h = ad.affine(xv, 1.0 / std_in, -mean_in / std_in)
    n_layers = len(params.weights)
    for i in range(n_layers):
        w, b = values[2 * i], values[2 * i + 1]
        h = ad.add(ad.matmul(h, w, transpose_b=True), b)
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.affine(h, std_out, mean_out)


def predict(params: MapParams, x: np.ndarray) -> np.ndarray:
    """Tape-free inference; arithmetic identical to `forward`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ValueError(f"input must be (n, {params.spec.in_dim}), got {x.shape}")
    mean_in, std_in = params.norm_in
    mean_out, std_out = params.norm_out
    h = x * (1.0 / std_in) + (-mean_in / std_in)
    n_layers = len(params.weights)
    for i in range(n_layers):
        h = h @ params.weights[i].T + params.biases[i]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h * std_out + mean_out


def param_arrays(params: MapParams) -> list[np.ndarray]:
    """Optimizer-facing flat list, same order as `value_params`."""
    out = []
    for w, b in zip(params.weights, params.biases):
        out.append(w)
        out.append(b)
    return out


def with_arrays(params: MapParams, arrays: list[np.ndarray]) -> MapParams:
    """Rebuild a MapParams from an optimizer-updated flat list."""
    n = len(params.weights)
    if len(arrays) != 2 * n:
        raise ValueError(f"expected {2 * n} arrays, got {len(arrays)}")
    out = params.copy()
    out.weights = [np.asarray(arrays[2 * i], dtype=np.float64) for i in range(n)]
    out.biases = [np.asarray(arrays[2 * i + 1], dtype=np.float64) for i in range(n)]
    return out
