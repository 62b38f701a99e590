"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (entered with
``with Graph() as g:``) whenever at least one operand requires a gradient.
Outside a graph every op is a plain numpy computation.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "tensor_from",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv1d",
    "conv1d_output_length",
    "conv2d",
    "relu",
    "concat",
    "slice",
    "mean",
    "sum",
    "reshape",
    "transpose",
    "backward",
    "finite_diff_grad",
    "max_relative_error",
]


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an input or a result."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (detached loss, mixed graphs...)."""


_ACTIVE: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar("cpnet_graph", default=None)


class Tensor:
    """A float64 array plus the bookkeeping needed for autodiff.

    ``grad`` is filled in by :func:`backward` for leaves with
    ``requires_grad`` set. Non-leaf tensors carry the id of the node that
    produced them in their graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "graph")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return self.graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Append-only tape of recorded ops.

    Parents always precede children, so walking the tape backwards is a
    valid reverse topological order.
    """

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Graph":
        if self._token is not None:
            raise GraphError("graph is already active")
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, fn) -> None:
        out.node_id = len(self.nodes)
        out.graph = self
        out.requires_grad = True
        self.nodes.append(_Node(kind, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self or loss.node_id is None:
            raise GraphError("loss was not produced by this graph (detached)")

        buffers: list[np.ndarray | None] = [None] * len(self.nodes)
        buffers[loss.node_id] = np.ones(loss.shape)
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for node_id in range(loss.node_id, -1, -1):
            grad = buffers[node_id]
            if grad is None:
                continue
            buffers[node_id] = None
            node = self.nodes[node_id]
            for parent, g in zip(node.inputs, node.backward(grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.graph is self:
                    prev = buffers[parent.node_id]
                    buffers[parent.node_id] = g if prev is None else prev + g
                else:
                    key = id(parent)
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + g)
                    else:
                        leaves[key] = (parent, g)
        for leaf in _leaves_of(self):
            acc = leaves.get(id(leaf))
            leaf.grad = np.array(acc[1], dtype=np.float64) if acc else np.zeros(leaf.shape)


def _leaves_of(graph: Graph) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and t.graph is None:
                seen.setdefault(id(t), t)
    return list(seen.values())


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _result(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    _check_finite(data, f"output of {kind}")
    out = Tensor(data)
    graph = _ACTIVE.get()
    if graph is None or not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t.graph is not None and t.graph is not graph:
            raise GraphError(f"{kind}: operand belongs to a different graph")
    graph._append(kind, inputs, out, fn)
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "constant")
    return Tensor(arr)


def tensor_from(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a shape and row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size != math.prod(shape):
        raise ShapeError(f"shape {shape} needs {math.prod(shape)} values, got {vals.size}")
    _check_finite(vals, "tensor_from values")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a} and {b}") from None
    # one operand must already have the result shape
    if out != a and out != b:
        raise ShapeError(f"incompatible shapes {a} and {b}: only one-sided broadcasting is supported")
    return out


def elementwise(a, b, kind: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if kind == "add":
        data = a.data + b.data

        def fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif kind == "sub":
        data = a.data - b.data

        def fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif kind == "mul":
        data = a.data * b.data

        def fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _result(kind, data, (a, b), fn)


def add(a, b) -> Tensor:
    return elementwise(a, b, "add")


def sub(a, b) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a, b) -> Tensor:
    return elementwise(a, b, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., m, k] and ``b`` of shape [k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs a[..., m, k] and b[k, n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result("matmul", data, (a, b), fn)


def conv1d_output_length(length: int, kernel: int, stride: int = 1, dilation: int = 1,
                         pad_left: int = 0, pad_right: int = 0) -> int:
    padded = length + pad_left + pad_right
    span = dilation * (kernel - 1) + 1
    if padded < span:
        raise ShapeError(f"receptive field {span} exceeds padded length {padded}")
    return (padded - span) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """Cross-correlation over the last axis of ``x`` [..., C_in, L].

    Output position ``t`` reads padded positions ``t*stride + j*dilation``.
    Padding is explicit and always zeros.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or dilation < 1 or pad_left < 0 or pad_right < 0:
        raise ShapeError("stride and dilation must be >= 1, padding >= 0")
    if weight.ndim != 3 or x.ndim < 2:
        raise ShapeError(f"conv1d needs x[..., C_in, L] and w[C_out, C_in, K], got {x.shape}, {weight.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv1d input has {x.shape[-2]} channels, weight expects {c_in}")
    length = x.shape[-1]
    l_out = conv1d_output_length(length, k, stride, dilation, pad_left, pad_right)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
        inputs = (x, weight, bias)

    lead = x.shape[:-2]
    pad = [(0, 0)] * (x.ndim - 1) + [(pad_left, pad_right)]
    xp = np.pad(x.data, pad) if (pad_left or pad_right) else x.data
    stop = stride * (l_out - 1) + 1
    # cols[..., t, c, j] = xp[..., c, t*stride + j*dilation]
    cols = np.stack([xp[..., j * dilation: j * dilation + stop: stride] for j in range(k)], axis=-1)
    cols = np.swapaxes(cols, -2, -3).reshape(*lead, l_out, c_in * k)
    w_flat = weight.data.reshape(c_out, c_in * k)
    data = np.swapaxes(cols @ w_flat.T, -1, -2)
    if bias is not None:
        data = data + bias.data[:, None]

    def fn(g):
        g_t = np.swapaxes(g, -1, -2)  # [..., L_out, C_out]
        gw = (g_t.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(weight.shape)
        gcols = (g_t @ w_flat).reshape(*lead, l_out, c_in, k)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j * dilation: j * dilation + stop: stride] += np.swapaxes(gcols[..., j], -1, -2)
        gx = gxp[..., pad_left: pad_left + length]
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, c_out, l_out).sum(axis=(0, 2))
        return gx, gw, gb

    return _result("conv1d", data, inputs, fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution of ``x`` [..., C_in, H, W] with ``weight`` [C_out, C_in, 1, 1]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"conv2d supports only 1x1 kernels, got weight shape {weight.shape}")
    if x.ndim < 3 or x.shape[-3] != weight.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} does not match weight {weight.shape}")
    c_out = weight.shape[0]
    w = weight.data[:, :, 0, 0]
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
        inputs = (x, weight, bias)
    data = np.einsum("oc,...chw->...ohw", w, x.data)
    if bias is not None:
        data = data + bias.data[:, None, None]

    def fn(g):
        gx = np.einsum("oc,...ohw->...chw", w, g)
        h, w_ = g.shape[-2:]
        gw = np.einsum("bohw,bchw->oc", g.reshape(-1, c_out, h, w_),
                       x.data.reshape(-1, x.shape[-3], h, w_))[:, :, None, None]
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, c_out, *g.shape[-2:]).sum(axis=(0, 2, 3))

    return _result("conv2d", data, inputs, fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _norm_axis(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise ShapeError(f"concat operands differ off the concat axis: {ref} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, tensors, fn)


def slice(x: Tensor, axis: int, start: int, length: int) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    extent = x.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ShapeError(f"slice [{start}, {start + length}) out of bounds for extent {extent}")
    index = [np.s_[:]] * x.ndim
    index[axis] = np.s_[start: start + length]
    index = tuple(index)

    def fn(g):
        gx = np.zeros(x.shape)
        gx[index] = g
        return (gx,)

    return _result("slice", x.data[index].copy(), (x,), fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _result("sum", np.array([x.data.sum()]), (x,), lambda g: (np.full(x.shape, g[0]),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _result("mean", np.array([x.data.mean()]), (x,), lambda g: (np.full(x.shape, g[0] / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf that requires a gradient in ``loss``'s graph.

    Leaf gradients are overwritten, never accumulated across calls.
    """
    if loss.graph is None:
        raise GraphError("loss is detached: it was not computed inside an active Graph")
    loss.graph.backward(loss)


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros(base.shape)
    flat = base.reshape(-1)
    out = grad.reshape(-1)

    def evaluate(arr):
        val = f(Tensor(arr.reshape(base.shape)))
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise NonFiniteError("finite_diff_grad: f returned a non-finite value")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(flat)
        flat[i] = orig - eps
        lo = evaluate(flat)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max_i |a_i - n_i| divided by the larger gradient magnitude of the tensor.

    Normalizing by the tensor's own scale keeps entries that are tiny next to
    their neighbours from being dominated by finite-difference roundoff.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / scale
