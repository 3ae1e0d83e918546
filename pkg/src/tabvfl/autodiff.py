"""Minimal reverse-mode tape over numpy float64 arrays.

Every value flowing through the models is a dense 2-D row-major float64
array (scalars are 0-d arrays).  The tape records just enough structure
for the fixed model topology used here; it is not a general autograd
framework.  Gradients are accumulated on leaf tensors only, which is what
the training loops need: parameters and the cut-point inputs exchanged
between parties.
"""

from __future__ import annotations

import numpy as np


def check_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate the universal value carrier: 2-D, float64, all finite."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return np.ascontiguousarray(arr)


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("data", "grad", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this node.

        ``seed`` is the upstream gradient; it defaults to 1.0 and is then
        only valid for scalar outputs.  Leaf gradients accumulate into
        ``.grad`` so repeated backward passes add up until ``zero_grad``.
        """
        if seed is None:
            if self.data.shape != ():
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.array(1.0)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ValueError(
                f"seed shape {seed.shape} does not match output shape {self.data.shape}"
            )

        order = _toposort(self)
        pending = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    # arithmetic sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """Trainable leaf with a stable id used for checkpoints and Adam state."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.asarray(data, dtype=np.float64))
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# primitive operations ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return Tensor(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(-g, b.data.shape)

    return Tensor(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return Tensor(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _sum_to_shape(g / b.data, a.data.shape),
            _sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, (a, b), vjp)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0.0
    out = a.data * mask

    def vjp(g):
        return (g * mask,)

    return Tensor(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (a,), vjp)


def log(a) -> Tensor:
    a = _lift(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return Tensor(out, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return Tensor(out, (a,), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return Tensor(out, (a,), vjp)


def concat_cols(tensors: list) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    widths = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def vjp(g):
        grads = []
        start = 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[:, start:start + w]))
            start += w
        return tuple(grads)

    return Tensor(out, tuple(tensors), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    out = np.ascontiguousarray(a.data[:, start:stop])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor(out, (a,), vjp)


def sparsemax(z, exclude: np.ndarray | None = None) -> Tensor:
    """Row-wise Euclidean projection onto the probability simplex.

    Columns flagged in ``exclude`` are projected onto the corresponding
    simplex face: their output (and gradient) is exactly zero.  Rows whose
    columns are all excluded fall back to the unrestricted projection.

    Backward applies the projection Jacobian: on the support set the
    incoming gradient is centered by its support mean, off the support it
    is zero.
    """
    z = _lift(z)
    out, support, ksize = _sparsemax_raw(z.data, exclude)

    def vjp(g):
        masked = g * support
        v = masked.sum(axis=1, keepdims=True) / ksize
        return (masked - support * v,)

    return Tensor(out, (z,), vjp)


def _sparsemax_raw(z: np.ndarray, exclude: np.ndarray | None = None):
    """Vectorized sort-threshold projection; returns (out, support, k)."""
    if z.ndim != 2 or z.shape[1] < 1:
        raise ValueError(f"sparsemax expects a B x d matrix, got {z.shape}")
    if exclude is not None and exclude.any():
        # Any value more than 1 below the smallest included entry can never
        # enter the support set, so this pushes excluded columns off it.
        included_min = np.where(exclude, np.inf, z).min(axis=1, keepdims=True)
        usable = np.isfinite(included_min[:, 0])
        fill = np.where(usable[:, None], included_min - 2.0, z)
        z = np.where(exclude & usable[:, None], fill, z)
    shifted = z - z.max(axis=1, keepdims=True)
    z_sorted = -np.sort(-shifted, axis=1)
    cumsum = np.cumsum(z_sorted, axis=1)
    ks = np.arange(1, z.shape[1] + 1, dtype=np.float64)
    feasible = 1.0 + ks * z_sorted > cumsum
    k = feasible.sum(axis=1)
    tau = (cumsum[np.arange(z.shape[0]), k.astype(np.intp) - 1] - 1.0) / k
    out = np.maximum(shifted - tau[:, None], 0.0)
    support = (out > 0.0).astype(np.float64)
    return out, support, k[:, None]


def cross_entropy_logits(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits.

    Uses the max-subtracted log-softmax; backward is (softmax - onehot)/B.
    """
    logits = _lift(logits)
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"logits must be B x C with C >= 2, got {z.shape}")
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    rows = np.arange(z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    out = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / z.shape[0],)

    return Tensor(out, (logits,), vjp)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Plain (non-tape) row softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
