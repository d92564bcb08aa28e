"""Dense fp64 tensors with reverse-mode automatic differentiation.

Everything downstream (sparse convolution, attention, recurrent text
encoding, the losses) is built from the operations in this module.  Design
constraints, chosen for verifiability rather than speed:

* float64 everywhere, row-major numpy storage;
* broadcasting only between equal shapes or scalar-with-tensor
  (``bias_add`` covers the one row-broadcast the pipeline needs);
* a ``Tape`` is rebuilt per forward pass and records nodes in execution
  order, which is already topological;
* reductions run left-to-right in row-major order, so reruns are bit-exact.

Gradients accumulate into ``Tensor.grad`` on leaf tensors only; repeated
``Tape.backward`` calls without ``zero_grad`` keep accumulating.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, IndexRangeError, ShapeError

ArrayLike = "np.ndarray | float | int | Sequence"


class Tensor:
    """A dense fp64 value, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded op: the output tensor, its inputs, and a pullback."""

    __slots__ = ("output", "inputs", "pullback")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 pullback: Callable[[np.ndarray], tuple]):
        self.output = output
        self.inputs = inputs
        self.pullback = pullback


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of ops for one forward pass.

    Use as a context manager; ops executed inside record themselves when
    any operand requires a gradient.  Nodes are appended in execution
    order, so the list is topologically sorted by construction.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Reverse-accumulate d(loss)/d(leaf) into leaf ``.grad`` fields.

        ``loss`` must be a scalar produced on this tape.  Each node is
        visited exactly once, in reverse order.  Fan-out sums naturally:
        a tensor consumed twice receives both contributions.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self._nodes}
        if id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")

        # Grads of intermediates live only in this map; leaves get .grad.
        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            out_grad = local.get(id(node.output))
            if out_grad is None:
                continue
            for tensor, grad in zip(node.inputs, node.pullback(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                if id(tensor) in produced:
                    key = id(tensor)
                    if key in local:
                        local[key] = local[key] + grad
                    else:
                        local[key] = grad
                else:
                    tensor._accumulate_grad(grad)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...],
          pullback: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._nodes.append(_Node(out, inputs, pullback))
    return out


# ---------------------------------------------------------------------------
# shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def pull(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), pull)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), pull)


def take(x: Tensor, index: int) -> Tensor:
    """Select one slice along the first axis (kernel-offset extraction)."""
    if not 0 <= index < x.shape[0]:
        raise IndexRangeError(f"take index {index} outside [0, {x.shape[0]})")
    full = x.shape

    def pull(g):
        out = np.zeros(full)
        out[index] = g
        return (out,)

    return _make(x.data[index].copy(), (x,), pull)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {x.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexRangeError(f"gather index outside [0, {n})")
    rows = n
    cols = x.shape[1]

    def pull(g):
        out = np.zeros((rows, cols))
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), pull)


def scatter_rows(x: Tensor, idx, num_rows: int) -> Tensor:
    """Scatter-add rows of ``x`` into a ``num_rows`` matrix (gather's dual)."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"scatter_rows: {x.shape} rows vs {idx.shape} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexRangeError(f"scatter index outside [0, {num_rows})")
    out = np.zeros((num_rows, x.shape[1]))
    np.add.at(out, idx, x.data)
    return _make(out, (x,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# elementwise ops (equal-shape or scalar-with-tensor broadcasting only)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not "
                         "equal and neither is scalar")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)  # scalar operand


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C row vector to every row of an N x C matrix."""
    if x.data.ndim != 2 or b.size != x.shape[1]:
        raise ShapeError(f"bias_add: matrix {x.shape} vs bias {b.shape}")
    bshape = b.shape
    return _make(x.data + b.data.reshape(1, -1), (x, b),
                 lambda g: (g, g.sum(axis=0).reshape(bshape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_array(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Evaluate each branch only where it is stable.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow; gradient is sigmoid(x)."""
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _make(y, (x,), lambda g: (g * _sigmoid_array(xd),))


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), pull)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.size if axis is None else shape[axis]

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), pull)


# ---------------------------------------------------------------------------
# fused ops


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stabilized softmax over one axis.

    ``mask`` (same shape, values in {0, 1}) restricts the distribution to
    the visible entries; hidden entries come out exactly 0 and receive no
    gradient.  No -inf values are ever materialized.  Every slice must
    keep at least one visible entry.
    """
    xd = x.data
    if mask is None:
        m = np.max(xd, axis=axis, keepdims=True)
        e = np.exp(xd - m)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != xd.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs input {x.shape}")
        if np.any(np.sum(mask, axis=axis) == 0):
            raise ContractError("softmax mask hides an entire slice")
        low = np.min(xd, axis=axis, keepdims=True)
        m = np.max(np.where(mask > 0, xd, low), axis=axis, keepdims=True)
        e = np.exp(xd - m) * mask
    y = e / np.sum(e, axis=axis, keepdims=True)

    def pull(g):
        dot = np.sum(y * g, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), pull)


def l2_normalize_rows(x: Tensor, eps: float = 1e-24) -> Tensor:
    """Scale each row of an N x C matrix to unit L2 norm.

    ``eps`` sits under the square root purely to keep an all-zero row
    finite; for any O(1) row it is far below fp64 resolution.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True) + eps)
    y = x.data / norms

    def pull(g):
        dot = np.sum(y * g, axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make(y, (x,), pull)
