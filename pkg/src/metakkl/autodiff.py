"""Reverse-mode automatic differentiation on a dynamically recorded tape.

Every operation is recorded as a node whose backward rule is itself written
in terms of recorded operations. Running `grad` with `create_graph=True`
therefore produces gradient values that are part of the tape, so a second
`grad` call differentiates through them. This is what the meta-update needs:
the outer gradient flows through the inner gradient-descent steps.

All data is float64. A tape is rebuilt per forward pass; node order equals
insertion order, which is a valid topological order.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Value",
    "Graph",
    "value",
    "record",
    "grad",
    "no_grad",
    "finite_diff_check",
    "FiniteDiffReport",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "square",
    "vsum",
    "vmean",
    "smul",
    "affine",
    "sqnorm",
    "concat",
    "vslice",
    "vexp",
]


class _State(threading.local):
    def __init__(self):
        self.graph: Graph | None = None
        self.recording: bool = True


_STATE = _State()


class no_grad:
    """Context manager that disables recording; ops inside compute data only."""

    def __enter__(self):
        self._prev = _STATE.recording
        _STATE.recording = False
        return self

    def __exit__(self, *exc):
        _STATE.recording = self._prev
        return False


class _enable_grad:
    def __enter__(self):
        self._prev = _STATE.recording
        _STATE.recording = True
        return self

    def __exit__(self, *exc):
        _STATE.recording = self._prev
        return False


class Value:
    """A node in the computation graph wrapping a float64 array.

    `parents` and `vjp` are populated only when the op was recorded with at
    least one grad-requiring input; leaves and detached results carry neither.
    """

    __slots__ = ("data", "requires_grad", "node_id", "op_kind", "parents", "vjp")

    def __init__(self, data, requires_grad: bool = False, op_kind: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.op_kind = op_kind
        self.parents: tuple[Value, ...] = ()
        self.vjp: Callable[[Value], tuple[Value | None, ...]] | None = None
        g = _STATE.graph
        self.node_id = g._append(self) if g is not None else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Value":
        return Value(self.data, requires_grad=False)

    def __repr__(self):
        return f"Value(op={self.op_kind}, shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_value(other))

    def __radd__(self, other):
        return add(_as_value(other), self)

    def __sub__(self, other):
        return sub(self, _as_value(other))

    def __rsub__(self, other):
        return sub(_as_value(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return smul(self, -1.0)


@dataclass
class Graph:
    """Append-only tape; insertion order is the topological order.

    Optional bookkeeping: ops record here when the graph is entered as a
    context. Backward traversal follows `Value.parents` directly, so a graph
    object is not required to differentiate.
    """

    nodes: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    _values: list[Value] = field(default_factory=list)

    def _append(self, v: Value) -> int:
        node_id = len(self.nodes)
        parent_ids = tuple(p.node_id for p in v.parents if p.node_id is not None)
        self.nodes.append((v.op_kind, parent_ids))
        self._values.append(v)
        return node_id

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._prev = _STATE.graph
        _STATE.graph = self
        return self

    def __exit__(self, *exc):
        _STATE.graph = self._prev
        return False


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _finite_or_raise(arr: np.ndarray, op_kind: str):
    # a single reduction: any nan/inf element makes the sum non-finite
    if not np.isfinite(arr.sum()):
        raise FloatingPointError(f"non-finite result in op '{op_kind}'")


def _make(op_kind: str, data: np.ndarray, inputs: tuple[Value, ...], vjp) -> Value:
    """Wrap an op result; link parents only when recording and needed."""
    _finite_or_raise(data, op_kind)
    rg = _STATE.recording and any(v.requires_grad for v in inputs)
    out = Value(data, requires_grad=rg, op_kind=op_kind)
    if rg:
        out.parents = inputs
        out.vjp = vjp
    return out


def record(op_kind: str, *inputs) -> Value:
    """Record an op by kind name. Thin dispatcher over the op functions."""
    try:
        fn = _OP_TABLE[op_kind]
    except KeyError:
        raise ValueError(f"unknown op-kind '{op_kind}'") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# broadcasting helpers (same-shape | scalar | row-vector against matrix)


def _check_broadcast(op: str, a: Value, b: Value):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ValueError(f"op '{op}': incompatible shapes {sa} and {sb}")


def _unbroadcast(g: Value, shape: tuple[int, ...]) -> Value:
    """Reduce a cotangent back to `shape` after forward broadcasting."""
    if g.data.shape == shape:
        return g
    if shape == ():
        return vsum(g)
    # row vector broadcast over matrix rows
    return vsum(g, axis=0)


# ---------------------------------------------------------------------------
# ops


def add(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_broadcast("add", a, b)
    def vjp(g: Value):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_broadcast("subtract", a, b)
    def vjp(g: Value):
        return _unbroadcast(g, a.data.shape), _unbroadcast(smul(g, -1.0), b.data.shape)
    return _make("subtract", a.data - b.data, (a, b), vjp)


def mul(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_broadcast("element-multiply", a, b)
    def vjp(g: Value):
        return (_unbroadcast(mul(g, b), a.data.shape),
                _unbroadcast(mul(g, a), b.data.shape))
    return _make("element-multiply", a.data * b.data, (a, b), vjp)


def matmul(a: Value, b: Value, transpose_a: bool = False, transpose_b: bool = False) -> Value:
    a, b = _as_value(a), _as_value(b)
    ta, tb = transpose_a, transpose_b
    ma = a.data.T if ta else a.data
    mb = b.data.T if tb else b.data
    if ma.ndim != 2 or mb.ndim != 2 or ma.shape[1] != mb.shape[0]:
        raise ValueError(
            f"op 'matrix-multiply': incompatible shapes {a.data.shape} and {b.data.shape}"
            f" (transpose_a={ta}, transpose_b={tb})"
        )

    def vjp(g: Value):
        if not ta and not tb:
            ga = matmul(g, b, transpose_b=True)
            gb = matmul(a, g, transpose_a=True)
        elif not ta and tb:
            ga = matmul(g, b)
            gb = matmul(g, a, transpose_a=True)
        elif ta and not tb:
            ga = matmul(b, g, transpose_b=True)
            gb = matmul(a, g)
        else:
            ga = matmul(b, g, transpose_a=True, transpose_b=True)
            gb = matmul(g, a, transpose_a=True, transpose_b=True)
        return ga, gb

    return _make("matrix-multiply", ma @ mb, (a, b), vjp)


def relu(a: Value) -> Value:
    a = _as_value(a)
    mask = (a.data > 0).astype(np.float64)  # derivative at exactly 0 is 0
    def vjp(g: Value):
        return (mul(g, Value(mask)),)
    return _make("relu", np.maximum(a.data, 0.0), (a,), vjp)


def square(a: Value) -> Value:
    a = _as_value(a)
    def vjp(g: Value):
        return (smul(mul(g, a), 2.0),)
    return _make("square", a.data * a.data, (a,), vjp)


def vsum(a: Value, axis: int | None = None) -> Value:
    a = _as_value(a)
    if axis is None:
        def vjp(g: Value):
            return (mul(g, Value(np.ones_like(a.data))),)
        return _make("sum", np.sum(a.data), (a,), vjp)
    if axis != 0 or a.data.ndim != 2:
        raise ValueError("op 'sum': only full reduction or axis=0 over a matrix")
    def vjp_axis(g: Value):
        return (mul(g, Value(np.ones_like(a.data))),)
    return _make("sum", np.sum(a.data, axis=0), (a,), vjp_axis)


def vmean(a: Value) -> Value:
    a = _as_value(a)
    n = a.data.size
    if n == 0:
        raise ValueError("op 'mean': empty input")
    def vjp(g: Value):
        return (mul(smul(g, 1.0 / n), Value(np.ones_like(a.data))),)
    return _make("mean", np.mean(a.data), (a,), vjp)


def smul(a: Value, c: float) -> Value:
    a = _as_value(a)
    c = float(c)
    def vjp(g: Value):
        return (smul(g, c),)
    return _make("scalar-multiply", a.data * c, (a,), vjp)


def affine(a: Value, scale: np.ndarray, shift: np.ndarray) -> Value:
    """Row-wise `a * scale + shift` with constant (non-learnable) coefficients."""
    a = _as_value(a)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    def vjp(g: Value):
        return (mul(g, Value(scale)),)
    return _make("affine-normalize", a.data * scale + shift, (a,), vjp)


def sqnorm(a: Value) -> Value:
    a = _as_value(a)
    def vjp(g: Value):
        return (mul(smul(a, 2.0), g),)
    return _make("squared-norm", np.sum(a.data * a.data), (a,), vjp)


def concat(parts: Sequence[Value], axis: int = 0) -> Value:
    parts = tuple(_as_value(p) for p in parts)
    if not parts:
        raise ValueError("op 'concat': no inputs")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Value):
        outs = []
        for k, p in enumerate(parts):
            sl = [slice(None)] * p.data.ndim
            sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(vslice(g, tuple(sl)))
        return tuple(outs)

    return _make("concat", np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def vslice(a: Value, index: tuple[slice, ...] | slice) -> Value:
    a = _as_value(a)
    idx = index if isinstance(index, tuple) else (index,)
    def vjp(g: Value):
        return (_pad(g, idx, a.data.shape),)
    return _make("slice", a.data[idx], (a,), vjp)


def _pad(a: Value, index: tuple[slice, ...], shape: tuple[int, ...]) -> Value:
    """Adjoint of `vslice`: embed into zeros of the original shape."""
    a = _as_value(a)
    out = np.zeros(shape, dtype=np.float64)
    out[index] = a.data
    def vjp(g: Value):
        return (vslice(g, index),)
    return _make("pad", out, (a,), vjp)


def vexp(a: Value) -> Value:
    a = _as_value(a)
    out_data = np.exp(a.data)
    def vjp(g: Value):
        return (mul(g, Value(out_data)),)
    return _make("exp", out_data, (a,), vjp)


def value(data, requires_grad: bool = False) -> Value:
    """Create a leaf value."""
    return Value(data, requires_grad=requires_grad)


_OP_TABLE: dict[str, Callable] = {
    "add": add,
    "subtract": sub,
    "element-multiply": mul,
    "matrix-multiply": matmul,
    "relu": relu,
    "square": square,
    "sum": vsum,
    "mean": vmean,
    "scalar-multiply": smul,
    "affine-normalize": affine,
    "squared-norm": sqnorm,
    "concat": concat,
    "slice": vslice,
    "exp": vexp,
    "pad": _pad,
}


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Value, wrt: Sequence[Value], create_graph: bool = False) -> list[Value]:
    """Gradients of a scalar output with respect to each value in `wrt`.

    With `create_graph=True` the returned gradients are recorded values, so a
    further `grad` call differentiates through them. Values outside the
    output's ancestry get an exact zero gradient.
    """
    if output.data.shape != ():
        raise ValueError(f"grad requires a scalar output, got shape {output.data.shape}")
    ctx = _enable_grad() if create_graph else no_grad()
    cot: dict[int, Value] = {}
    with ctx:
        cot[id(output)] = Value(1.0)
        if output.requires_grad:
            for node in reversed(_toposort(output)):
                g = cot.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = cot.get(id(parent))
                    cot[id(parent)] = pg if prev is None else add(prev, pg)
        out = []
        for w in wrt:
            g = cot.get(id(w))
            if g is None:
                g = Value(np.zeros_like(w.data))
            out.append(g)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass(frozen=True)
class FiniteDiffReport:
    passed: bool
    max_rel_err: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    n_excluded: int


def finite_diff_check(f: Callable[[Value], Value], point: Value, tol: float,
                      step: float = 1e-6) -> FiniteDiffReport:
    """Compare `grad` against central finite differences at `point`.

    Coordinates where the second difference reveals a kink (relu subgradient
    points) are excluded. Relative error uses a denominator floored at 1.
    """
    p = Value(np.array(point.data, copy=True), requires_grad=True)
    out = f(p)
    g = grad(out, [p])[0].data
    f0 = float(out.data)

    max_rel = 0.0
    worst: tuple[int, ...] | None = None
    n_checked = 0
    n_excluded = 0
    base = np.array(p.data, copy=True)
    with no_grad():
        for idx in np.ndindex(base.shape if base.shape else (1,)):
            key = idx if base.shape else ()
            pert = base.copy()
            pert[key] += step
            f_plus = float(f(Value(pert)).data)
            pert[key] -= 2.0 * step
            f_minus = float(f(Value(pert)).data)
            # second difference ~ step^2 * f'' when smooth, ~ step * |slope jump|
            # at a kink; step^1.5 separates the two regimes
            if abs(f_plus + f_minus - 2.0 * f0) > (1.0 + abs(f0)) * step**1.5:
                n_excluded += 1
                continue
            fd = (f_plus - f_minus) / (2.0 * step)
            gi = float(g[key]) if base.shape else float(g)
            rel = abs(fd - gi) / max(1.0, abs(fd), abs(gi))
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = key
    return FiniteDiffReport(passed=max_rel < tol, max_rel_err=max_rel,
                            worst_index=worst, n_checked=n_checked,
                            n_excluded=n_excluded)
