"""Dense N-d tensor with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` whose ``_node``
records the op name, its parent tensors and a closure mapping the output
gradient to one gradient per parent.  :func:`backward` walks the recorded
nodes in reverse topological order, visiting each exactly once.

Binary elementwise ops never broadcast: operands must have identical shapes
(python scalars are allowed).  Use :func:`expand` to make a broadcast explicit.
"""
from __future__ import annotations

import contextlib
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


_DEFAULT_DTYPE = [np.float32]


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for consumer ``name`` derived from the run seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or get_default_dtype()
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        _check_finite("tensor", self.data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data, out.grad, out.requires_grad, out._node, out.name = self.data, None, False, None, None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return tabs(self)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: produced non-finite values (shape {arr.shape})")


def make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as an op output; record the node when a parent needs grad."""
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data, out.grad, out._node, out.name = data, None, None, None
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._node = Node(op, tuple(parents), backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (use expand() to broadcast)")


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return make("add", a.data + float(b), (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    a = as_tensor(a, b.dtype)
    _same_shape("sub", a, b)
    return make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        b = float(b)
        return make("mul", a.data * b, (a,), lambda g: (g * b,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a = as_tensor(a, b.dtype)
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    return make("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make("pow", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    pos = ad > 0
    return make("leaky_relu", np.where(pos, ad, ad * slope), (a,), lambda g: (np.where(pos, g, g * slope),))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    ad = a.data
    pos = ad > 0
    return make("relu", np.where(pos, ad, 0).astype(ad.dtype), (a,), lambda g: (g * pos,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return make("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


# --- reductions and shape ops --------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return make("sum", np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules, leading axes allowed)."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ValueError(f"expand: cannot expand {src} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1
    )
    for i, s in enumerate(src):
        if s != 1 and s != shape[lead + i]:
            raise ValueError(f"expand: cannot expand {src} to {shape}")

    def bw(g):
        return (g.sum(axis=axes).reshape(src) if axes else g,)

    return make("expand", np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        ref = tuple(s for i, s in enumerate(tensors[0].shape) if i != axis)
        if other != ref:
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return make("getitem", np.ascontiguousarray(a.data[idx]), (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return make("log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# --- differentiation -----------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing grad."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  ``coords``
    restricts the probe to a subset of flat indices (all by default).
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs a float64 input")
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-4]")
    x.requires_grad = True
    x.grad = None
    loss = fn(x)
    backward(loss)
    analytic = x.grad.reshape(-1).copy()
    base = float(loss.data.reshape(-1)[0])
    with no_grad():
        if float(fn(x).data.reshape(-1)[0]) != base:
            raise RuntimeError("grad_check: fn is not deterministic")
    flat = x.data.reshape(-1)
    worst = 0.0
    idxs = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(x).data.reshape(-1)[0])
            flat[i] = orig - eps
            lo = float(fn(x).data.reshape(-1)[0])
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    x.grad = None
    return worst


# --- declarative graphs ----------------------------------------------------

OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp, "log": log,
    "tanh": tanh, "sqrt": sqrt, "abs": tabs, "relu": relu, "leaky_relu": leaky_relu,
    "sum": tsum, "mean": mean, "reshape": reshape, "transpose": transpose, "expand": expand,
    "matmul": matmul, "log_softmax": log_softmax, "pow": power,
    "concat": lambda *ts, axis=0: concat(ts, axis),
}


@dataclass
class Graph:
    """Ordered list of ``(op, input names, output name, kwargs)`` steps.

    Steps are appended in execution order, so the list is a topological order by
    construction.  Extra op names can be registered in :data:`OPS`.
    """

    steps: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    executed: bool = False

    def add(self, op: str, inputs: Sequence[str], output: str, **kwargs) -> "Graph":
        if op not in OPS:
            raise KeyError(f"unknown op {op!r}")
        if output in {s[2] for s in self.steps}:
            raise ValueError(f"output {output!r} already defined")
        self.steps.append((op, tuple(inputs), output, kwargs))
        return self


def forward(graph: Graph, inputs: dict) -> dict:
    values = {k: as_tensor(v) for k, v in inputs.items()}
    for op, names, out, kwargs in graph.steps:
        missing = [n for n in names if n not in values]
        if missing:
            raise KeyError(f"{op} -> {out}: unbound inputs {missing}")
        try:
            values[out] = OPS[op](*(values[n] for n in names), **kwargs)
        except ValueError as exc:
            shapes = [values[n].shape for n in names]
            raise ValueError(f"{op} -> {out} with input shapes {shapes}: {exc}") from exc
    graph.values, graph.executed = values, True
    return {out: values[out] for _, _, out, _ in graph.steps}


def graph_backward(graph: Graph, loss: str) -> dict:
    if not graph.executed:
        raise RuntimeError("backward called before forward")
    for t in graph.values.values():
        if t._node is None:
            t.grad = None
    backward(graph.values[loss])
    return {k: t.grad for k, t in graph.values.items() if t._node is None and t.requires_grad}
