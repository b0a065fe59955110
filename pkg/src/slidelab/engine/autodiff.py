"""Reverse-mode autodiff over dense numpy arrays.

A Graph is a tape: ops append nodes in execution order and backward() walks
the tape reversed, which fixes the gradient accumulation order and makes
results bitwise reproducible for a given seed and config. Checkpointed
segments record a single node whose backward re-executes the segment's
forward and backpropagates through the recomputed sub-tape; because the
replay runs the identical op sequence on identical inputs, gradients match
the non-checkpointed walk bit for bit.

All byte accounting is logical and explicit: tensors register with their
graph's PoolMeter on creation and deregister on free/close. Nothing here
inspects Python object lifetimes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np

from ..errors import (
    CheckpointError,
    ContractError,
    NumericDomainError,
    ShapeError,
)
from .pools import FAST, HOST, PoolMeter

_stack = threading.local()


def _graph_stack() -> list:
    gs = getattr(_stack, "graphs", None)
    if gs is None:
        gs = []
        _stack.graphs = gs
    return gs


def current_graph() -> "Graph":
    gs = _graph_stack()
    if not gs:
        raise ContractError("no active Graph; wrap computation in `with Graph(...):`")
    return gs[-1]


class Tensor:
    """Dense array plus autodiff/accounting metadata."""

    __slots__ = ("data", "requires_grad", "grad", "pool", "creator", "graph", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool, pool: str, graph: "Graph", name: str = ""):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.pool = pool
        self.creator: Node | None = None
        self.graph = graph
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return 0 if self.data is None else self.data.nbytes

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    # Convenience wrappers; the op set itself lives at module level.
    def __add__(self, other):
        return add_const(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_const(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul_const(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul_const(self, 1.0 / other) if _is_scalar(other) else div(self, other)

    def __rtruediv__(self, other):
        if not _is_scalar(other):
            raise ContractError("tensor/tensor division goes through div()")
        return mul_const(pow_const(self, -1.0), other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flags = "g" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, pool={self.pool}{', ' + flags if flags else ''})"


class Node:
    """One recorded op: inputs, single output, saved-for-backward payload.

    A segment node carries empty interior state; its segment_id plus the
    recorded builder closure are enough to recompute everything in backward.
    """

    __slots__ = ("op", "inputs", "output", "saved", "backward_fn", "segment_id")

    def __init__(self, op, inputs, output, saved, backward_fn, segment_id=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.backward_fn = backward_fn
        self.segment_id = segment_id


class Graph:
    """Recording context: tape, meter, and open accounting entries."""

    def __init__(
        self,
        *,
        dtype=np.float32,
        meter: PoolMeter | None = None,
        fast_budget_bytes: int | None = None,
        trace=None,
        check_finite: bool = False,
    ):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ContractError(f"graph dtype must be f32 or f64, got {self.dtype}")
        if meter is None:
            meter = PoolMeter(fast_budget_bytes=fast_budget_bytes, trace=trace)
        self.meter = meter
        self.trace = trace if trace is not None else meter.trace
        self.check_finite = check_finite
        self.recording = True
        self.tape: list[Node] = []
        self.leaves: list[Tensor] = []
        self._live: dict[int, Tensor] = {}
        self._grad_bytes: int = 0
        self._span: list[Tensor] | None = None
        self._closed = False

    # -- context management -------------------------------------------------

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _graph_stack().pop()
        self.close()

    @contextmanager
    def no_grad(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    # -- tensor creation and accounting -------------------------------------

    def _register(self, t: Tensor, tag: str = "") -> None:
        if self._closed:
            raise ContractError("graph is closed")
        self.meter.alloc(t.pool, t.nbytes, tag=tag or t.name)
        self._live[id(t)] = t
        if self._span is not None:
            self._span.append(t)

    def tensor(self, data, requires_grad: bool = False, pool: str = FAST, name: str = "") -> Tensor:
        arr = np.asarray(data)
        if arr.dtype.kind in "fiub":
            arr = np.ascontiguousarray(arr, dtype=self.dtype)
        else:
            raise ContractError(f"unsupported tensor dtype {arr.dtype}")
        t = Tensor(arr, requires_grad, pool, self, name=name)
        self._register(t, tag=name or "tensor")
        if requires_grad:
            self.leaves.append(t)
        return t

    def param(self, data, name: str = "") -> Tensor:
        return self.tensor(data, requires_grad=True, name=name)

    def constant(self, data, name: str = "") -> Tensor:
        return self.tensor(data, requires_grad=False, name=name)

    def adopt(self, t: Tensor) -> Tensor:
        """Bind an existing tensor (typically a parameter) to this graph's accounting."""
        if id(t) in self._live:
            return t
        t.graph = self
        self._register(t, tag=t.name or "adopted")
        if t.requires_grad and t.creator is None:
            self.leaves.append(t)
        return t

    def free_tensor(self, t: Tensor) -> None:
        """Drop a tensor's payload and release its accounting."""
        entry = self._live.pop(id(t), None)
        if entry is not None:
            self.meter.free(t.pool, t.nbytes, tag=t.name or "free")
        t.data = None
        t.grad = None

    def _account_grad(self, nbytes: int) -> None:
        self.meter.alloc(FAST, nbytes, tag="grad")
        self._grad_bytes += nbytes

    def close(self) -> None:
        """Release all open accounting. Tensor payloads owned elsewhere survive."""
        if self._closed:
            return
        for t in self._live.values():
            self.meter.free(t.pool, t.nbytes, tag="close")
        self._live.clear()
        if self._grad_bytes:
            self.meter.free(FAST, self._grad_bytes, tag="close-grads")
            self._grad_bytes = 0
        # Every recorded op is a Tensor.creator <-> Node.output cycle, and
        # backward_fn closures pin more tensors; break the links here so a
        # step's buffers die by refcount instead of queueing for the cycle
        # collector (one full graph per step adds up to gigabytes of
        # pending garbage in a long run).
        for node in self.tape:
            if node.output is not None:
                node.output.creator = None
            node.inputs = ()
            node.output = None
            node.saved = None
            node.backward_fn = None
        self.tape.clear()
        self.leaves.clear()
        self._closed = True


@contextmanager
def no_grad():
    g = current_graph()
    with g.no_grad():
        yield


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _check_inputs(g: Graph, op: str, tensors) -> None:
    for t in tensors:
        if t.data is None:
            raise ContractError(f"{op}: input tensor was freed")
        if g.check_finite and not np.all(np.isfinite(t.data)):
            raise NumericDomainError(f"{op}: non-finite input values")


def _same_dtype(op: str, *tensors) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


def _make(op: str, inputs: tuple, data: np.ndarray, saved, backward_fn) -> Tensor:
    g = current_graph()
    _check_inputs(g, op, inputs)
    data = np.ascontiguousarray(data)
    rg = g.recording and any(t.requires_grad for t in inputs)
    out = Tensor(data, rg, FAST, g)
    g._register(out, tag=op)
    if rg:
        node = Node(op, inputs, out, saved, backward_fn)
        out.creator = node
        g.tape.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gdim, sdim) in enumerate(zip(grad.shape, shape)) if sdim == 1 and gdim != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)

    def bwd(node, g):
        sa, sb = node.saved
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _make("add", (a, b), a.data + b.data, (a.shape, b.shape), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)

    def bwd(node, g):
        sa, sb = node.saved
        return (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _make("sub", (a, b), a.data - b.data, (a.shape, b.shape), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)

    def bwd(node, g):
        da, db, sa, sb = node.saved
        return (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb))

    return _make("mul", (a, b), a.data * b.data, (a.data, b.data, a.shape, b.shape), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("div", a, b)

    def bwd(node, g):
        da, db, sa, sb = node.saved
        return (_unbroadcast(g / db, sa), _unbroadcast(-g * da / (db * db), sb))

    return _make("div", (a, b), a.data / b.data, (a.data, b.data, a.shape, b.shape), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bwd(node, g):
        return (g,)

    return _make("add_const", (a,), a.data + c, None, bwd)


def mul_const(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bwd(node, g):
        return (g * node.saved,)

    return _make("mul_const", (a,), a.data * c, c, bwd)


def neg(a: Tensor) -> Tensor:
    return mul_const(a, -1.0)


def pow_const(a: Tensor, p: float) -> Tensor:
    def bwd(node, g):
        x, pp = node.saved
        return (g * pp * np.power(x, pp - 1.0),)

    return _make("pow_const", (a,), np.power(a.data, a.data.dtype.type(p)), (a.data, a.data.dtype.type(p)), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(node, g):
        return (g * (0.5 / node.saved),)

    return _make("sqrt", (a,), out_data, out_data, bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(node, g):
        return (g * node.saved,)

    return _make("exp", (a,), out_data, out_data, bwd)


def log(a: Tensor) -> Tensor:
    g = current_graph()
    if g.check_finite and np.any(a.data <= 0):
        raise NumericDomainError("log: non-positive input")

    def bwd(node, grad):
        return (grad / node.saved,)

    return _make("log", (a,), np.log(a.data), a.data, bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(node, g):
        t = node.saved
        return (g * (1.0 - t * t),)

    return _make("tanh", (a,), out_data, out_data, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype)

    def bwd(node, g):
        s = node.saved
        return (g * s * (1.0 - s),)

    return _make("sigmoid", (a,), out_data, out_data, bwd)


_GELU_K = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU (exact erf form is not needed at this scale)."""
    x = a.data
    inner = _GELU_K * (x + _GELU_C * x * x * x)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def bwd(node, g):
        xx, tt = node.saved
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * xx * xx)
        return ((g * (0.5 * (1.0 + tt) + 0.5 * xx * (1.0 - tt * tt) * dinner)).astype(xx.dtype),)

    return _make("gelu", (a,), out_data, (x, t), bwd)


# -- shape ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bwd(node, g):
        da, db = node.saved
        ga = np.matmul(g, np.swapaxes(db, -1, -2))
        gb = np.matmul(np.swapaxes(da, -1, -2), g)
        return (_unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape))

    return _make("matmul", (a, b), np.matmul(a.data, b.data), (a.data, b.data), bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def bwd(node, g):
        return (np.transpose(g, node.saved),)

    return _make("transpose", (a,), np.transpose(a.data, axes), inv, bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def bwd(node, g):
        return (g.reshape(node.saved),)

    return _make("reshape", (a,), a.data.reshape(shape), a.shape, bwd)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    def bwd(node, g):
        return (_unbroadcast(g, node.saved),)

    return _make("broadcast_to", (a,), np.broadcast_to(a.data, shape), a.shape, bwd)


def concat(tensors: list, axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    _same_dtype("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(node, g):
        ax, sp = node.saved
        return tuple(np.ascontiguousarray(p) for p in np.split(g, sp, axis=ax))

    return _make("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), (axis, splits), bwd)


def slice_(a: Tensor, key) -> Tensor:
    def bwd(node, g):
        shape, k = node.saved
        gx = np.zeros(shape, dtype=g.dtype)
        gx[k] = g
        return (gx,)

    return _make("slice", (a,), a.data[key], (a.shape, key), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows needs a 1-D index, got shape {idx.shape}")

    def bwd(node, g):
        shape, ii = node.saved
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, ii, g)
        return (gx,)

    return _make("take_rows", (a,), a.data[idx], (a.shape, idx), bwd)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(node, g):
        shape, ax, kd = node.saved
        return (np.ascontiguousarray(_expand_reduced(g, shape, ax, kd)),)

    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    return _make("sum", (a,), data, (a.shape, axis, keepdims), bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(node, g):
        shape, ax, kd, n = node.saved
        return (np.ascontiguousarray(_expand_reduced(g, shape, ax, kd) / n),)

    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    return _make("mean", (a,), data, (a.shape, axis, keepdims, a.data.dtype.type(count)), bwd)


# -- normalisation and softmax ----------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out_data = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def bwd(node, g):
        p, ax = node.saved
        dot = (g * p).sum(axis=ax, keepdims=True)
        return ((p * (g - dot)).astype(p.dtype),)

    return _make("softmax", (a,), out_data, (out_data, axis), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = (shifted - lse).astype(x.dtype)

    def bwd(node, g):
        logp, ax = node.saved
        return ((g - np.exp(logp) * g.sum(axis=ax, keepdims=True)).astype(logp.dtype),)

    return _make("log_softmax", (a,), out_data, (out_data, axis), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine pair."""
    _same_dtype("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mu) * invstd
    out_data = (xhat * gamma.data + beta.data).astype(xd.dtype)

    def bwd(node, g):
        xh, istd, gam, dd = node.saved
        dxhat = g * gam
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xh).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dx = (istd / dd) * (
            dd * dxhat - dxhat.sum(axis=-1, keepdims=True) - xh * (dxhat * xh).sum(axis=-1, keepdims=True)
        )
        return (dx.astype(xh.dtype), dgamma.astype(xh.dtype), dbeta.astype(xh.dtype))

    return _make("layer_norm", (x, gamma, beta), out_data, (xhat, invstd, gamma.data, xd.dtype.type(d)), bwd)


def detach(a: Tensor) -> Tensor:
    """Stop-gradient view sharing the payload; not separately accounted."""
    g = current_graph()
    t = Tensor(a.data, False, a.pool, g, name=a.name)
    return t


# -- backward ----------------------------------------------------------------


def _walk(graph: Graph, tape: list, root: Tensor, seed: np.ndarray, want: tuple) -> dict:
    """Reverse walk over one tape. Returns grads for `want` tensors by id.

    Leaf tensors (creator is None, requires_grad) accumulate into .grad
    directly, which keeps parameter accumulation order identical whether the
    ops sit on the main tape or inside a recomputed segment sub-tape.
    """
    meter = graph.meter
    tape_out_ids = {id(n.output) for n in tape}
    want_ids = {id(t) for t in want}
    pending: dict[int, np.ndarray] = {}
    collected: dict[int, np.ndarray] = {}

    def store(store_map, key, grad):
        buf = store_map.get(key)
        if buf is None:
            buf = np.array(grad, copy=True)
            store_map[key] = buf
            meter.alloc(FAST, buf.nbytes, tag="grad")
        else:
            np.add(buf, grad, out=buf)

    pending[id(root)] = np.array(seed, copy=True)
    meter.alloc(FAST, seed.nbytes, tag="grad")

    for node in reversed(tape):
        gout = pending.pop(id(node.output), None)
        if gout is None:
            continue
        grads = node.backward_fn(node, gout)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in tape_out_ids:
                store(pending, tid, gt)
            elif tid in want_ids:
                store(collected, tid, gt)
            elif t.creator is None:
                if t.grad is None:
                    t.grad = np.array(gt, copy=True)
                    t.graph._account_grad(t.grad.nbytes)
                else:
                    np.add(t.grad, gt, out=t.grad)
            # else: an outer-graph interior nobody asked about; drop.
        meter.free(FAST, gout.nbytes, tag="grad")

    for buf in pending.values():  # branches the root never reached
        meter.free(FAST, buf.nbytes, tag="grad")
    for buf in collected.values():  # ownership moves to the caller
        meter.free(FAST, buf.nbytes, tag="grad")
    return collected


def backward(root: Tensor) -> None:
    """Fill .grad on every requires_grad leaf reachable from root.

    Unreached leaves registered with the graph get exact zero grads.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    g = root.graph
    if not root.requires_grad:
        for leaf in g.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
                leaf.graph._account_grad(leaf.grad.nbytes)
        return
    seed = np.ones_like(root.data)
    _walk(g, g.tape, root, seed, want=())
    for leaf in g.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
            leaf.graph._account_grad(leaf.grad.nbytes)


# -- checkpointed segments ---------------------------------------------------


def _segment_backward(node: Node, gout: np.ndarray):
    fn, segment_id = node.saved
    outer = current_graph()
    if outer.trace is not None:
        outer.trace.emit("recompute", segment_id=segment_id, nbytes=0)
    sub = Graph(dtype=outer.dtype, meter=outer.meter, check_finite=outer.check_finite)
    with sub:
        out2 = fn(*node.inputs)
        if node.output.data is not None and not np.array_equal(out2.data, node.output.data):
            raise CheckpointError(f"segment {segment_id!r} recompute diverged from recorded output")
        collected = _walk(sub, sub.tape, out2, gout, want=node.inputs)
    return tuple(collected.get(id(t)) for t in node.inputs)


def checkpoint(fn, inputs: tuple, segment_id: str) -> Tensor:
    """Run fn(*inputs) saving only boundaries; recompute interior in backward.

    The forward runs unrecorded, interior allocations are freed immediately,
    and one segment node joins the tape. fn must be a pure function of its
    inputs and any parameters it closes over.
    """
    g = current_graph()
    if g._span is not None:
        raise CheckpointError("nested checkpoint segments are not supported")
    allocs: list[Tensor] = []
    g._span = allocs
    prev = g.recording
    g.recording = False
    try:
        out = fn(*inputs)
    finally:
        g.recording = prev
        g._span = None
    if not isinstance(out, Tensor):
        raise CheckpointError("segment fn must return a single Tensor")
    for t in allocs:
        if t is not out:
            g.free_tensor(t)
    if g.recording:
        out.requires_grad = True
        node = Node("segment", tuple(inputs), out, (fn, segment_id), _segment_backward, segment_id)
        out.creator = node
        g.tape.append(node)
    return out


def pool_move(t: Tensor, dst: str) -> Tensor:
    """Retag a tensor's pool with byte-accurate transfer accounting."""
    if t.data is None:
        raise ContractError("pool_move on a freed tensor")
    if dst == t.pool:
        return t
    t.graph.meter.move(t.pool, dst, t.nbytes, tag=t.name or "tensor")
    t.pool = dst
    return t


ops = SimpleNamespace(
    add=add,
    sub=sub,
    mul=mul,
    div=div,
    add_const=add_const,
    mul_const=mul_const,
    neg=neg,
    pow_const=pow_const,
    sqrt=sqrt,
    exp=exp,
    log=log,
    tanh=tanh,
    sigmoid=sigmoid,
    gelu=gelu,
    matmul=matmul,
    transpose=transpose,
    reshape=reshape,
    broadcast_to=broadcast_to,
    concat=concat,
    slice=slice_,
    take_rows=take_rows,
    sum=sum_,
    mean=mean_,
    softmax=softmax,
    log_softmax=log_softmax,
    layer_norm=layer_norm,
    detach=detach,
)
