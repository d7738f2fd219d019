"""Reverse-mode differentiation over dense float64 arrays.

Graphs are built eagerly: every operation allocates a `Node` carrying its
value, its parent nodes and a vector-Jacobian closure per parent, so the
node creation order is already a topological order.  Backpropagation walks
the reachable nodes in reverse creation order, which makes gradient
accumulation deterministic from run to run.

All functional ops below (`add`, `matmul`, `logsumexp`, ...) accept a mix
of `Node` and plain array arguments.  When no argument is a `Node` they
return a plain numpy result, so numeric code (e.g. the CRF recursions) can
be written once and used both for evaluation and for training graphs.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator

import numpy as np

__all__ = [
    "Node",
    "ParamStore",
    "Graph",
    "GraphContext",
    "evaluate",
    "gradient",
    "value_and_grad",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
    "glorot_uniform",
]

_ids = itertools.count()
_check_finite = True

CHECKPOINT_MAGIC = "EBMSSL-CKPT v1"


@contextmanager
def finite_checks_disabled() -> Iterator[None]:
    """Temporarily skip the per-node finiteness check.

    Used by the SGLD sampler, which must observe (and recover from)
    non-finite gradients instead of aborting the whole step.
    """
    global _check_finite
    prev = _check_finite
    _check_finite = False
    try:
        yield
    finally:
        _check_finite = prev


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One operation result in a computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjps", "_id")

    def __init__(self, value, parents: tuple = (), vjps: tuple = ()):
        value = _asarray(value)
        if _check_finite and not np.all(np.isfinite(value)):
            raise ValueError("non-finite intermediate value in graph")
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjps = vjps
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, id={self._id})"


def backward(out: Node) -> None:
    """Backpropagate from a scalar output, filling `.grad` on reachable nodes."""
    if out.value.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {out.value.shape}")
    seen: dict[int, Node] = {}
    stack = [out]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen[n._id] = n
        stack.extend(n._parents)
    order = sorted(seen.values(), key=lambda n: -n._id)
    for n in order:
        n.grad = None
    out.grad = np.ones_like(out.value)
    for n in order:
        if n.grad is None:
            continue
        for parent, vjp in zip(n._parents, n._vjps):
            contrib = vjp(n.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


# ---------------------------------------------------------------------------
# Functional ops (Node-or-ndarray polymorphic)
# ---------------------------------------------------------------------------


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else _asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape` by summing."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, out: np.ndarray, vjp_a: Callable, vjp_b: Callable):
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(vjp_a)
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(vjp_b)
    if not parents:
        return out
    return Node(out, tuple(parents), tuple(vjps))


def add(a, b):
    av, bv = _value(a), _value(b)
    return _binary(
        a, b, av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def sub(a, b):
    av, bv = _value(a), _value(b)
    return _binary(
        a, b, av - bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    )


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def div(a, b):
    av, bv = _value(a), _value(b)
    return _binary(
        a, b, av / bv,
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape),
    )


def matmul(a, b):
    av, bv = _value(a), _value(b)
    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports at most 2-D operands")
    out = av @ bv

    def vjp_a(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return bv @ g
        if bv.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bv)
        return g @ bv.T

    def vjp_b(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return _binary(a, b, out, vjp_a, vjp_b)


def _unary(x, out: np.ndarray, vjp: Callable):
    if isinstance(x, Node):
        return Node(out, (x,), (vjp,))
    return out


def tanh(x):
    out = np.tanh(_value(x))
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def sigmoid(x):
    # 0.5 * (1 + tanh(x/2)) is overflow-safe for any finite x
    out = 0.5 * (1.0 + np.tanh(0.5 * _value(x)))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def relu(x):
    xv = _value(x)
    return _unary(x, np.maximum(xv, 0.0), lambda g: g * (xv > 0))


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    xv = _value(x)
    out = np.logaddexp(0.0, xv)
    return _unary(x, out, lambda g: g / (1.0 + np.exp(-xv)))


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(_value(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = _value(x)
    return _unary(x, np.log(xv), lambda g: g / xv)


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - numpy-style name
    xv = _value(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _unary(x, out, vjp)


def mean(x, axis=None, keepdims: bool = False):
    xv = _value(x)
    n = xv.size if axis is None else xv.shape[axis]
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


def logsumexp(x, axis=None, keepdims: bool = False):
    """Overflow-safe log-sum-exp; shifting the input by c shifts the output by c."""
    xv = _value(x)
    m = xv.max(axis=axis, keepdims=True)
    shifted = np.exp(xv - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def vjp(g):
        soft = shifted / s
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, soft.shape) * soft if axis is not None else g * soft

    return _unary(x, out, vjp)


def softmax_cross_entropy(logits, labels):
    """Per-row cross-entropy: logsumexp(logits_i) - logits_i[y_i].

    `logits` is (K,) with an int label, or (B, K) with (B,) int labels;
    returns a scalar or a (B,) vector respectively.
    """
    lv = _value(logits)
    y = np.asarray(labels)
    if lv.ndim == 1:
        lv2, y2, squeeze = lv[None, :], y.reshape(1), True
    else:
        lv2, y2, squeeze = lv, y, False
    if y2.shape[0] != lv2.shape[0]:
        raise ValueError("labels/logits batch size mismatch")
    if np.any(y2 < 0) or np.any(y2 >= lv2.shape[1]):
        raise ValueError("label out of range")
    m = lv2.max(axis=1, keepdims=True)
    p = np.exp(lv2 - m)
    z = p.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    rows = np.arange(lv2.shape[0])
    out = lse - lv2[rows, y2]
    if squeeze:
        out = out.reshape(())

    def vjp(g):
        soft = p / z
        soft[rows, y2] -= 1.0
        gg = np.asarray(g).reshape(-1, 1)
        full = gg * soft
        return full.reshape(lv.shape)

    return _unary(logits, out, vjp)


def take(x, idx):
    """Indexing/slicing/gather; covers embedding lookup via integer arrays."""
    xv = _value(x)
    out = xv[idx]

    def vjp(g):
        z = np.zeros_like(xv)
        np.add.at(z, idx, g)
        return z

    return _unary(x, out, vjp)


def reshape(x, shape):
    xv = _value(x)
    return _unary(x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def concat(parts: Iterable, axis: int = 0):
    parts = list(parts)
    vals = [_value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    node_parents, vjps = [], []
    for i, p in enumerate(parts):
        if isinstance(p, Node):
            lo, hi = offsets[i], offsets[i + 1]

            def vjp(g, lo=lo, hi=hi):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return g[tuple(sl)]

            node_parents.append(p)
            vjps.append(vjp)
    if not node_parents:
        return out
    return Node(out, tuple(node_parents), tuple(vjps))


def stack(parts: Iterable, axis: int = 0):
    parts = list(parts)
    vals = [_value(p) for p in parts]
    out = np.stack(vals, axis=axis)
    node_parents, vjps = [], []
    for i, p in enumerate(parts):
        if isinstance(p, Node):
            node_parents.append(p)
            vjps.append(lambda g, i=i: np.take(g, i, axis=axis))
    if not node_parents:
        return out
    return Node(out, tuple(node_parents), tuple(vjps))


def constant(value) -> Node:
    """A leaf node with no parents (gradient sink)."""
    return Node(_asarray(value))


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Flat named collection of float64 parameter arrays with gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"duplicate parameter name: {name!r}")
        arr = _asarray(value).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite initial value for parameter {name!r}")
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = _asarray(value)
        if arr.shape != self._values[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {arr.shape} vs {self._values[name].shape}"
            )
        self._values[name] = arr.copy()

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        if g.shape != self._grads[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        self._grads[name] = self._grads[name] + g

    def zero_grad(self) -> None:
        for name, v in self._values.items():
            self._grads[name] = np.zeros_like(v)

    def items(self):
        return self._values.items()

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, v in self._values.items():
            other.add(name, v)
            other._grads[name] = self._grads[name].copy()
        return other


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


class GraphContext:
    """Binds parameter and input names to leaf nodes during one graph build.

    Repeated `param(name)` calls within one build return the same leaf, so
    gradients of shared parameters accumulate correctly.
    """

    def __init__(self, params: ParamStore, inputs: dict[str, np.ndarray] | None = None):
        self._params = params
        self._inputs = inputs or {}
        self._param_leaves: dict[str, Node] = {}
        self._input_leaves: dict[str, Node] = {}

    def param(self, name: str) -> Node:
        if name not in self._param_leaves:
            if name not in self._params:
                raise KeyError(f"unbound parameter name: {name!r}")
            self._param_leaves[name] = Node(self._params.value(name))
        return self._param_leaves[name]

    def input(self, name: str) -> Node:
        if name not in self._input_leaves:
            if name not in self._inputs:
                raise KeyError(f"unbound input name: {name!r}")
            self._input_leaves[name] = Node(self._inputs[name])
        return self._input_leaves[name]

    def param_grads(self) -> dict[str, np.ndarray]:
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self._param_leaves.items()
        }

    def input_grads(self) -> dict[str, np.ndarray]:
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self._input_leaves.items()
        }


class Graph:
    """A computation captured as a builder `fn(ctx) -> Node`."""

    def __init__(self, build: Callable[[GraphContext], Node], name: str = ""):
        self.build = build
        self.name = name


def evaluate(graph: Graph, params: ParamStore, inputs: dict | None = None) -> np.ndarray:
    """Forward pass; pure with respect to `params`."""
    ctx = GraphContext(params, inputs)
    out = graph.build(ctx)
    return out.value if isinstance(out, Node) else _asarray(out)


def value_and_grad(
    graph: Graph, params: ParamStore, inputs: dict | None = None
) -> tuple[np.ndarray, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Forward + backward; returns (value, parameter grads, input grads).

    Does not touch the store's gradient slots.
    """
    ctx = GraphContext(params, inputs)
    out = graph.build(ctx)
    if not isinstance(out, Node):
        raise ValueError("graph output does not depend on any parameter or input")
    backward(out)
    return out.value, ctx.param_grads(), ctx.input_grads()


def gradient(graph: Graph, params: ParamStore, inputs: dict | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(output)/d(theta) into the store's gradient slots.

    Repeated calls without `zero_grad` sum.  Returns the input gradients,
    which callers like the SGLD sampler need for d(output)/d(x).
    """
    _, pgrads, igrads = value_and_grad(graph, params, inputs)
    for name, g in pgrads.items():
        params.accumulate_grad(name, g)
    return igrads


def finite_diff_check(
    graph: Graph,
    params: ParamStore,
    inputs: dict | None = None,
    step: float = 1e-5,
    param_names: list[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - c| / (|a| + |c| + 1e-12).
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must be in (0, 1e-2], got {step}")
    _, pgrads, _ = value_and_grad(graph, params, inputs)
    names = param_names if param_names is not None else list(pgrads)
    worst = 0.0
    for name in names:
        value = params.value(name)
        flat = value.reshape(-1)
        analytic = pgrads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(evaluate(graph, params, inputs))
            flat[i] = orig - step
            f_minus = float(evaluate(graph, params, inputs))
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic[i] - central) / (abs(analytic[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Initialization and checkpoint I/O
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[0], shape[1]
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def save_checkpoint(path, params: ParamStore) -> None:
    """Text checkpoint, round-trip exact at 17 significant digits."""
    lines = [CHECKPOINT_MAGIC]
    for name in sorted(params.names()):
        value = params.value(name)
        dims = " ".join(str(d) for d in value.shape)
        lines.append(f"{name} {value.ndim}{' ' + dims if dims else ''}")
        lines.append(" ".join(f"{v:.17g}" for v in value.reshape(-1)))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ParamStore:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    params = ParamStore()
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        if len(header) < 2:
            raise ValueError(f"malformed checkpoint header at line {i + 1}: {lines[i]!r}")
        name, ndims = header[0], int(header[1])
        if len(header) != 2 + ndims:
            raise ValueError(f"malformed checkpoint header at line {i + 1}: {lines[i]!r}")
        shape = tuple(int(d) for d in header[2:])
        if i + 1 >= len(lines):
            raise ValueError(f"truncated checkpoint: missing data for {name!r}")
        data = np.array([float(tok) for tok in lines[i + 1].split()], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if data.size != expected:
            raise ValueError(
                f"checkpoint data size mismatch for {name!r}: got {data.size}, want {expected}"
            )
        params.add(name, data.reshape(shape))
        i += 2
    return params
