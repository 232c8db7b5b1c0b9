"""Minimal dense tensors with tape-based reverse-mode differentiation.

Every primitive accepts plain ``numpy`` arrays or :class:`Tensor` objects.
With only arrays as inputs a primitive is an ordinary numpy computation and
returns an array; this is the fast path used by inference code running on
frozen parameters.  When at least one input is a Tensor the result is a
Tensor, and if a :class:`Graph` is active and some input requires a gradient
the operation is recorded on that graph so :func:`backward` can replay the
adjoints in reverse.

Broadcasting is deliberately narrow: ``add``/``sub`` accept a 1-D bias on the
last axis, ``mul`` accepts a column operand of shape ``(..., 1)``.  Everything
else needs an explicit ``repeat``/``reshape``.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PRECISIONS = {"standard": np.float32, "extended": np.float64}

_state = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shape."""


class NumericalFailure(ArithmeticError):
    """Raised when a gradient computation produces NaN or inf."""


def default_dtype():
    return PRECISIONS[getattr(_state, "precision", "standard")]


def current_precision() -> str:
    return getattr(_state, "precision", "standard")


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    old = current_precision()
    _state.precision = name
    try:
        yield
    finally:
        _state.precision = old


def set_precision(name: str) -> None:
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _state.precision = name


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{rg})"

    # operator sugar, all routed through the primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass(eq=False)
class Graph:
    """Ordered tape of executed primitives.

    Use as a context manager; primitives executed inside the ``with`` block
    are recorded when any input requires a gradient.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for x in node.inputs:
                if isinstance(x, Tensor) and x.requires_grad and x._node is None:
                    seen.setdefault(id(x), x)
        return list(seen.values())

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.output.grad = None
            for x in node.inputs:
                if isinstance(x, Tensor) and x.grad is not None:
                    x.grad = np.zeros_like(x.data)

    def clear(self) -> None:
        """Zero every gradient reachable from the tape and drop the tape."""
        self.zero_grad()
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


def _graph_stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = _state.graphs = []
    return stack


def active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording even if a graph is active."""
    stack = _graph_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def _finish(op: str, out: np.ndarray, inputs: Sequence, backward_fn) -> np.ndarray | Tensor:
    """Wrap a primitive's result and record it on the active graph if needed."""
    has_tensor = False
    needs_grad = False
    for x in inputs:
        if isinstance(x, Tensor):
            has_tensor = True
            if x.requires_grad:
                needs_grad = True
                break
    if not has_tensor:
        return out
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._node = None
    t.name = None
    graph = active_graph() if needs_grad else None
    t.requires_grad = graph is not None
    if graph is not None:
        node = Node(op, tuple(inputs), t, backward_fn)
        t._node = node
        graph.nodes.append(node)
    return t


def _shape_error(op: str, *shapes) -> ShapeError:
    pretty = ", ".join(str(list(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {pretty}")


def _reduce_bias(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


# ---------------------------------------------------------------- primitives


def matmul(a, b):
    """Matrix product. Supports ``(..., n, k) @ (k, m)`` and batched 3-D @ 3-D."""
    A, B = _raw(a), _raw(b)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise _shape_error("matmul", A.shape, B.shape)
    if B.ndim > 2 and (A.ndim != B.ndim or A.shape[:-2] != B.shape[:-2]):
        raise _shape_error("matmul", A.shape, B.shape)
    out = A @ B

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _finish("matmul", out, (a, b), back)


def _check_bias(op, A, B):
    if A.shape == B.shape:
        return
    if B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        return
    raise _shape_error(op, A.shape, B.shape)


def add(a, b):
    """Elementwise sum; ``b`` may be a 1-D bias over the last axis."""
    A, B = _raw(a), _raw(b)
    _check_bias("add", A, B)
    out = A + B

    def back(g):
        return g, _reduce_bias(g, B.shape)

    return _finish("add", out, (a, b), back)


def sub(a, b):
    A, B = _raw(a), _raw(b)
    _check_bias("sub", A, B)
    out = A - B

    def back(g):
        return g, -_reduce_bias(g, B.shape)

    return _finish("sub", out, (a, b), back)


def mul(a, b):
    """Elementwise product; either operand may be a ``(..., 1)`` column."""
    A, B = _raw(a), _raw(b)
    if A.shape != B.shape:
        col_b = B.ndim == A.ndim and B.shape[-1] == 1 and B.shape[:-1] == A.shape[:-1]
        col_a = A.ndim == B.ndim and A.shape[-1] == 1 and A.shape[:-1] == B.shape[:-1]
        if not (col_a or col_b):
            raise _shape_error("mul", A.shape, B.shape)
    out = A * B

    def back(g):
        ga = g * B
        gb = g * A
        if ga.shape != A.shape:
            ga = ga.sum(axis=-1, keepdims=True)
        if gb.shape != B.shape:
            gb = gb.sum(axis=-1, keepdims=True)
        return ga, gb

    return _finish("mul", out, (a, b), back)


def scale(a, c: float):
    A = _raw(a)
    out = A * c

    def back(g):
        return (g * c,)

    return _finish("scale", out, (a,), back)


def concat(xs: Sequence, axis: int = -1):
    arrays = [_raw(x) for x in xs]
    if not arrays:
        raise ShapeError("concat: empty input list")
    nd = arrays[0].ndim
    ax = axis % nd
    for arr in arrays[1:]:
        if arr.ndim != nd or arr.shape[:ax] + arr.shape[ax + 1:] != arrays[0].shape[:ax] + arrays[0].shape[ax + 1:]:
            raise _shape_error("concat", *(x.shape for x in arrays))
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _finish("concat", out, tuple(xs), back)


def stack(xs: Sequence, axis: int = 0):
    arrays = [_raw(x) for x in xs]
    if not arrays or any(arr.shape != arrays[0].shape for arr in arrays):
        raise _shape_error("stack", *(x.shape for x in arrays))
    out = np.stack(arrays, axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.moveaxis(g, ax, 0))

    return _finish("stack", out, tuple(xs), back)


def tanh(a):
    out = np.tanh(_raw(a))

    def back(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", out, (a,), back)


def sigmoid(a):
    A = _raw(a)
    out = 0.5 * (np.tanh(0.5 * A) + 1.0)

    def back(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (a,), back)


def exp(a):
    out = np.exp(_raw(a))

    def back(g):
        return (g * out,)

    return _finish("exp", out, (a,), back)


def log(a):
    A = _raw(a)
    out = np.log(A)

    def back(g):
        return (g / A,)

    return _finish("log", out, (a,), back)


def softmax(a, axis: int = -1):
    A = _raw(a)
    e = np.exp(A - A.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", out, (a,), back)


def log_softmax(a, axis: int = -1):
    A = _raw(a)
    shifted = A - A.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", out, (a,), back)


def embedding(table, ids):
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    T = _raw(table)
    idx = np.asarray(ids)
    if idx.dtype.kind not in "iu":
        raise TypeError(f"embedding: ids must be integers, got dtype {idx.dtype}")
    if T.ndim != 2:
        raise _shape_error("embedding", T.shape, idx.shape)
    if idx.size and (idx.max() >= T.shape[0] or idx.min() < 0):
        raise IndexError(f"embedding: id {int(idx.max())} out of range for {T.shape[0]} rows")
    out = T[idx]

    def back(g):
        gt = np.zeros_like(T)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, T.shape[1]))
        return (gt,)

    return _finish("embedding", out, (table,), back)


def slice_(a, key):
    """Basic indexing ``a[key]`` (ints and slices only)."""
    A = _raw(a)
    out = A[key]

    def back(g):
        ga = np.zeros_like(A)
        ga[key] = g
        return (ga,)

    return _finish("slice", out, (a,), back)


def pick(a, idx):
    """Per-row selection ``a[i, idx[i]]`` from a 2-D tensor."""
    A = _raw(a)
    idx = np.asarray(idx)
    if A.ndim != 2 or idx.shape != (A.shape[0],):
        raise _shape_error("pick", A.shape, idx.shape)
    rows = np.arange(A.shape[0])
    out = A[rows, idx]

    def back(g):
        ga = np.zeros_like(A)
        ga[rows, idx] = g
        return (ga,)

    return _finish("pick", out, (a,), back)


def reshape(a, shape):
    A = _raw(a)
    out = A.reshape(shape)

    def back(g):
        return (g.reshape(A.shape),)

    return _finish("reshape", out, (a,), back)


def repeat(a, n: int, axis: int):
    """Tile along a singleton axis: ``(B, 1, D) -> (B, n, D)`` for ``axis=1``."""
    A = _raw(a)
    if A.shape[axis] != 1:
        raise _shape_error("repeat", A.shape)
    out = np.repeat(A, n, axis=axis)

    def back(g):
        return (g.sum(axis=axis, keepdims=True),)

    return _finish("repeat", out, (a,), back)


def sum_(a, axis: int | None = None):
    """Sum; with ``axis=None`` the result has shape ``(1,)``."""
    A = _raw(a)
    if axis is None:
        out = np.asarray(A.sum(), dtype=A.dtype).reshape(1)

        def back(g):
            return (np.full(A.shape, g[0], dtype=A.dtype),)
    else:
        out = A.sum(axis=axis)

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axis), A.shape).copy(),)

    return _finish("sum", out, (a,), back)


def mean(a, axis: int | None = None):
    A = _raw(a)
    if axis is None:
        n = A.size
        out = np.asarray(A.mean(), dtype=A.dtype).reshape(1)

        def back(g):
            return (np.full(A.shape, g[0] / n, dtype=A.dtype),)
    else:
        n = A.shape[axis]
        out = A.mean(axis=axis)

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, A.shape).copy(),)

    return _finish("mean", out, (a,), back)


def squared_error(pred, target):
    """Elementwise ``(pred - target) ** 2``."""
    P, Y = _raw(pred), _raw(target)
    if P.shape != Y.shape:
        raise _shape_error("squared_error", P.shape, Y.shape)
    diff = P - Y
    out = diff * diff

    def back(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return _finish("squared_error", out, (pred, target), back)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scale": scale,
    "concat": concat,
    "stack": stack,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "log": log,
    "exp": exp,
    "embedding-lookup": embedding,
    "slice": slice_,
    "pick": pick,
    "reshape": reshape,
    "repeat": repeat,
    "sum": sum_,
    "mean": mean,
    "squared-error": squared_error,
}

_LIST_INPUT = {"concat", "stack"}


def apply_primitive(op: str, inputs: Sequence, **kwargs):
    """Dispatch by primitive name, e.g. ``apply_primitive("tanh", [x])``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op in _LIST_INPUT:
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, graph: Graph | None = None, seed_grad: float = 1.0) -> None:
    """Propagate adjoints from a scalar ``loss`` to every leaf on the tape.

    Leaf gradients accumulate across calls; intermediate tensors receive the
    adjoint of the most recent pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.shape != (1,):
        raise ValueError(f"backward: loss must be scalar with shape [1], got {list(loss.shape)}")
    if graph is None:
        graph = active_graph()
    if graph is None or loss._node is None:
        raise ValueError("backward: loss was not recorded on a graph")
    adj: dict[int, np.ndarray] = {id(loss): np.full((1,), seed_grad, dtype=loss.dtype)}
    found = False
    for node in reversed(graph.nodes):
        out = node.output
        g = adj.pop(id(out), None)
        if out is loss:
            found = True
        if g is None:
            continue
        out.grad = g
        grads = node.backward(g)
        for x, gx in zip(node.inputs, grads):
            if not isinstance(x, Tensor) or not x.requires_grad or gx is None:
                continue
            if x._node is None:
                x.grad = gx.astype(x.dtype, copy=True) if x.grad is None else x.grad + gx
            else:
                k = id(x)
                prev = adj.get(k)
                adj[k] = gx if prev is None else prev + gx
    if not found:
        raise ValueError("backward: loss is not on the given graph")


# --------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    passed: bool
    failure: str | None = None

    def __bool__(self) -> bool:
        return self.passed


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and rebuilds its computation from ``params``
    each call.  At most ``max_coords`` coordinates are sampled (all of them
    when fewer exist).  Relative error uses ``max(|a|, |n|, floor)`` as the
    denominator so coordinates with vanishing gradient are not penalized
    for round-off.
    """
    if current_precision() != "extended":
        raise RuntimeError("finite_diff_check requires extended precision")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite_diff_check: parameters must be float64")
        p.grad = None
    with Graph() as g:
        loss = f()
        backward(loss, g)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if any(not np.all(np.isfinite(a)) for a in analytic):
        return GradCheckReport(math.nan, 0, False, "non-finite analytic gradient")

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(chosen)]

    worst = 0.0
    with no_record():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = _raw(f()).item()
            flat[j] = orig - h
            fm = _raw(f()).item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[i].reshape(-1)[j])
            if not (math.isfinite(num) and math.isfinite(a)):
                return GradCheckReport(math.nan, len(coords), False, f"non-finite gradient at param {i} coord {j}")
            worst = max(worst, _rel_err(a, num, floor))
    return GradCheckReport(worst, len(coords), worst < tol)


def as_tensors(arrays: dict, requires_grad: bool = True) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}
