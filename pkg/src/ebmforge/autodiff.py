"""Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive registers an adjoint rule that is itself written with
primitives, so gradients produced with ``retain_graph=True`` are ordinary
tracked tensors and can be differentiated again (double backward).

The graph is implicit: each tracked tensor owns a :class:`Node` holding its
parents and adjoint rule. Node ids come from a global counter, so parents
always have smaller ids than their children and reverse id order is a valid
topological order for the backward pass.
"""

from __future__ import annotations

import builtins
import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "constant",
    "stop_grad",
    "grad",
    "no_grad",
    "is_tracking",
    "apply_primitive",
    "PRIMITIVES",
    "add",
    "subtract",
    "multiply",
    "divide",
    "negate",
    "matmul",
    "transpose",
    "sum",
    "sum_to",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "sigmoid",
    "swish",
    "broadcast",
    "reshape",
    "concat",
    "slice",
    "embed",
    "avg_pool_2x2",
    "upsample_2x2",
    "l2_norm_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


_ids = itertools.count()
_tracking = True


class Node:
    __slots__ = ("id", "kind", "parents", "vjp")

    def __init__(self, kind: str, parents: tuple, vjp: Callable | None):
        self.id = next(_ids)
        self.kind = kind
        self.parents = parents
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.id}, {self.kind!r})"


class Tensor:
    """A float64 array plus an optional node in the derivative graph."""

    __slots__ = ("value", "node")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.value = arr
        self.node = Node("leaf", (), None) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = f", node={self.node.id}" if self.node is not None else ""
        return f"Tensor({self.value!r}{tag})"

    def __len__(self):
        return self.value.shape[0]

    # operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad: bool = False) -> Tensor:
    """New tensor from array-like data; a tracked leaf when ``requires_grad``."""
    if isinstance(value, Tensor):
        value = value.value
    return Tensor(value, requires_grad)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def stop_grad(x) -> Tensor:
    """Same values as ``x``, detached from the graph."""
    x = constant(x)
    if x.node is None:
        return x
    out = Tensor.__new__(Tensor)
    out.value = x.value
    out.node = None
    return out


def is_tracking() -> bool:
    return _tracking


@contextmanager
def no_grad():
    """Disable node creation; forward values are still computed."""
    global _tracking
    prev = _tracking
    _tracking = False
    try:
        yield
    finally:
        _tracking = prev


def _check_finite(arr: np.ndarray, kind: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {kind}")


def _make(kind: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    if type(value) is not np.ndarray:
        value = np.asarray(value, dtype=np.float64)
    _check_finite(value, kind)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.node = None
    if _tracking and any(p.node is not None for p in parents):
        out.node = Node(kind, parents, vjp)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_pair(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a, b
    if a.size == 1 and a.ndim <= b.ndim:
        return broadcast(reshape(a, ()), sb), b
    if b.size == 1 and b.ndim <= a.ndim:
        return a, broadcast(reshape(b, ()), sa)
    # trailing-dimension broadcast only: the smaller shape must be a suffix
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return broadcast(a, sb), b
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return a, broadcast(b, sa)
    raise ShapeError(f"shapes {sa} and {sb} do not broadcast (trailing/scalar only)")


def _reduce_axes(src: tuple, dst: tuple) -> tuple[tuple, tuple]:
    """Axes of ``src`` to sum so the result reshapes to ``dst``."""
    lead = len(src) - len(dst)
    axes = list(range(lead))
    for i, d in enumerate(dst):
        if d == 1 and src[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes), dst


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _broadcast_pair(constant(a), constant(b))
    return _make("add", a.value + b.value, (a, b), lambda g: (g, g))


def subtract(a, b) -> Tensor:
    a, b = _broadcast_pair(constant(a), constant(b))
    return _make("subtract", a.value - b.value, (a, b), lambda g: (g, negate(g)))


def negate(a) -> Tensor:
    a = constant(a)
    return _make("negate", -a.value, (a,), lambda g: (negate(g),))


def multiply(a, b) -> Tensor:
    a, b = _broadcast_pair(constant(a), constant(b))
    return _make("multiply", a.value * b.value, (a, b),
                 lambda g: (multiply(g, b), multiply(g, a)))


def divide(a, b) -> Tensor:
    a, b = _broadcast_pair(constant(a), constant(b))
    if np.any(b.value == 0):
        raise ZeroDivisionError("divide by zero")

    def vjp(g):
        ga = divide(g, b)
        return ga, negate(divide(multiply(ga, a), b))

    return _make("divide", a.value / b.value, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _make("matmul", a.value @ b.value, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make("transpose", a.value.T.copy(), (a,), lambda g: (transpose(g),))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        if a.ndim == 0:
            raise ShapeError("cannot sum a scalar along an axis")
        axes = tuple(int(ax) % a.ndim for ax in np.atleast_1d(axis))
    kept = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    shape = a.shape
    return _make("sum", np.sum(a.value, axis=axes), (a,),
                 lambda g: (broadcast(reshape(g, kept), shape),))


def sum_to(a, shape: tuple) -> Tensor:
    """Adjoint of :func:`broadcast`: sum ``a`` down to ``shape``."""
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    axes, _ = _reduce_axes(a.shape, shape)
    src = a.shape
    value = np.sum(a.value, axis=axes).reshape(shape) if axes else a.value.reshape(shape)
    return _make("sum_to", value, (a,), lambda g: (broadcast(g, src),))


def broadcast(a, shape: tuple) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    return _make("broadcast", value, (a,), lambda g: (sum_to(g, src),))


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    if n == 0:
        raise ShapeError("mean of empty tensor")
    return multiply(sum(a, axis), 1.0 / n)


def square(a) -> Tensor:
    a = constant(a)
    return _make("square", a.value * a.value, (a,),
                 lambda g: (multiply(g, multiply(a, 2.0)),))


def sqrt(a) -> Tensor:
    a = constant(a)
    if np.any(a.value < 0):
        raise ValueError("sqrt of negative input")
    out_value = np.sqrt(a.value)
    out = _make("sqrt", out_value, (a,), None)

    def vjp(g):
        return (divide(multiply(g, 0.5), out),)

    if out.node is not None:
        out.node.vjp = vjp
    return out


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out = _make("exp", value, (a,), None)
    if out.node is not None:
        out.node.vjp = lambda g: (multiply(g, out),)
    return out


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.value < 0):
        raise ValueError("log of negative input")
    return _make("log", np.log(a.value), (a,), lambda g: (divide(g, a),))


_sigmoid_np = expit


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _make("sigmoid", _sigmoid_np(a.value), (a,), None)
    if out.node is not None:
        out.node.vjp = lambda g: (multiply(g, multiply(out, subtract(1.0, out))),)
    return out


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = constant(a)
    s_val = _sigmoid_np(a.value)

    def vjp(g):
        s = sigmoid(a)
        # d/dx x*s(x) = s + x*s*(1-s)
        return (multiply(g, add(s, multiply(multiply(a, s), subtract(1.0, s)))),)

    return _make("swish", a.value * s_val, (a,), vjp)


def reshape(a, shape: tuple) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    src = a.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g: (reshape(g, src),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(constant(p) for p in parts)
    if not parts:
        raise ShapeError("concat of nothing")
    ndim = parts[0].ndim
    axis = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(
                p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat shapes do not conform")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [builtins.slice(None)] * ndim
            idx[axis] = builtins.slice(int(lo), int(hi))
            out.append(slice(g, tuple(idx)))
        return tuple(out)

    return _make("concat", np.concatenate([p.value for p in parts], axis=axis), parts, vjp)


def _normalize_index(index, ndim: int) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, np.integer, builtins.slice)):
            raise TypeError("slice supports integers and basic slices only")
    return index


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic (view-style) indexing; adjoint scatters into zeros."""
    a = constant(a)
    index = _normalize_index(index, a.ndim)
    src = a.shape
    return _make("slice", np.array(a.value[index]), (a,), lambda g: (embed(g, src, index),))


def embed(a, shape: tuple, index) -> Tensor:
    """Zeros of ``shape`` with ``a`` written at ``index``; adjoint of slice."""
    a = constant(a)
    shape = tuple(shape)
    index = _normalize_index(index, len(shape))
    value = np.zeros(shape)
    try:
        value[index] = a.value
    except ValueError as exc:
        raise ShapeError(f"cannot embed {a.shape} into {shape} at {index}") from exc
    return _make("embed", value, (a,), lambda g: (slice(g, index),))


def avg_pool_2x2(a) -> Tensor:
    """Mean over non-overlapping 2x2 blocks of the last two axes."""
    a = constant(a)
    if a.ndim < 2 or a.shape[-1] % 2 or a.shape[-2] % 2:
        raise ShapeError(f"avg-pool-2x2 needs even trailing extents, got {a.shape}")
    *lead, h, w = a.shape
    v = a.value.reshape(*lead, h // 2, 2, w // 2, 2)
    # fixed reduction order keeps multi-scale sums reproducible
    value = ((v[..., 0, :, 0] + v[..., 0, :, 1]) + (v[..., 1, :, 0] + v[..., 1, :, 1])) * 0.25
    return _make("avg_pool_2x2", value, (a,),
                 lambda g: (multiply(upsample_2x2(g), 0.25),))


def upsample_2x2(a) -> Tensor:
    """Nearest-neighbour 2x upsampling; adjoint is 4 * avg_pool_2x2."""
    a = constant(a)
    if a.ndim < 2:
        raise ShapeError("upsample-2x2 needs at least two axes")
    value = np.repeat(np.repeat(a.value, 2, axis=-2), 2, axis=-1)
    return _make("upsample_2x2", value, (a,),
                 lambda g: (multiply(avg_pool_2x2(g), 4.0),))


def l2_norm_rows(a) -> Tensor:
    """Euclidean norm of each row of a matrix, shape (rows,)."""
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError("l2-norm-rows expects a matrix")
    out = _make("l2_norm_rows", np.sqrt(np.sum(a.value * a.value, axis=1)), (a,), None)
    if out.node is not None:
        rows, cols = a.shape

        def vjp(g):
            scale = reshape(divide(g, out), (rows, 1))
            return (multiply(broadcast(scale, (rows, cols)), a),)

        out.node.vjp = vjp
    return out


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "matmul": matmul,
    "transpose": transpose,
    "sum": sum,
    "sum_to": sum_to,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "swish": swish,
    "broadcast": broadcast,
    "reshape": reshape,
    "concat": concat,
    "slice": slice,
    "embed": embed,
    "avg-pool-2x2": avg_pool_2x2,
    "upsample-2x2": upsample_2x2,
    "l2-norm-rows": l2_norm_rows,
}


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("matmul", [a, b])``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise KeyError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass


def grad(output: Tensor, wrt: Sequence[Tensor], retain_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``retain_graph`` the adjoint computation is itself recorded, so the
    returned tensors can be fed to another ``grad`` call. Tracked tensors that
    the output does not depend on get zero gradients; untracked ones raise.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    single = isinstance(wrt, Tensor)
    wrt = [wrt] if single else list(wrt)
    for w in wrt:
        if w.node is None:
            raise ValueError("wrt tensor is not tracked in the graph")
    if output.node is None:
        res = [Tensor(np.zeros(w.shape)) for w in wrt]
        return res[0] if single else res

    floor = min(w.node.id for w in wrt)
    # collect nodes reachable from the output that can lie on a path from wrt
    nodes: dict[int, Node] = {}
    stack = [output.node]
    while stack:
        n = stack.pop()
        if n.id in nodes or n.id < floor:
            continue
        nodes[n.id] = n
        for p in n.parents:
            if p.node is not None and p.node.id >= floor and p.node.id not in nodes:
                stack.append(p.node)

    adj: dict[int, Tensor] = {output.node.id: Tensor(np.ones(output.shape))}
    wanted = {w.node.id for w in wrt}

    global _tracking
    prev = _tracking
    _tracking = bool(retain_graph) and prev
    try:
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = adj.get(nid)
            if g is None or node.vjp is None:
                continue
            if nid not in wanted:
                # intermediate adjoints are consumed once
                adj.pop(nid)
            contribs = node.vjp(g)
            for parent, c in zip(node.parents, contribs):
                if parent.node is None or c is None or parent.node.id < floor:
                    continue
                pid = parent.node.id
                adj[pid] = c if pid not in adj else add(adj[pid], c)
    finally:
        _tracking = prev

    out = []
    for w in wrt:
        g = adj.get(w.node.id)
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif not retain_graph:
            g = stop_grad(g)
        _check_finite(g.value, "grad")
        out.append(g)
    return out[0] if single else out
