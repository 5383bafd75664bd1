"""A small dense-tensor engine with reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result remembers its parents and a closure mapping the output gradient to the
parents' gradients; :meth:`Tensor.backward` walks that record in reverse
topological order. Each record can be swept once.

Works in float32 or float64; an op never changes the dtype of its inputs.
Broadcasting is limited to adding a trailing-dimension bias; everything else
takes explicitly shaped operands (see :func:`expand` and :func:`reshape`).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import BoundsError, ShapeError, StaleTapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise StaleTapeError("this graph was already swept; rebuild it with a new forward pass")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._backward = None
            node._consumed = True


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise StaleTapeError("graph contains an already swept node")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_bias(a, b):
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _sum_to_bias(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if _is_bias(a, b):
        return _node(a.data + b.data, (a, b), lambda g: (g, _sum_to_bias(g)))
    _check_same("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if _is_bias(a, b):
        return _node(a.data - b.data, (a, b), lambda g: (g, -_sum_to_bias(g)))
    _check_same("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``a @ b`` where b is a 2-D matrix shared over a's leading axes, or both
    operands carry the same leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim == 2:
        def backward(g):
            ga = g @ b.data.T
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ")

        def backward(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _node(a.data @ b.data, (a, b), backward)


def bmv(w, x) -> Tensor:
    """Batched matrix-vector product: (..., c, d) x (..., d) -> (..., c)."""
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim < 2 or w.shape[:-2] != x.shape[:-1] or w.shape[-1] != x.shape[-1]:
        raise ShapeError(f"bmv: shapes {w.shape} and {x.shape} are incompatible")

    def backward(g):
        return g[..., :, None] * x.data[..., None, :], np.einsum("...cd,...c->...d", w.data, g)
    return _node(np.einsum("...cd,...d->...c", w.data, x.data), (w, x), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    ref = ts[0].shape[:ax] + ts[0].shape[ax + 1:]
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ref:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} disagree off axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def expand(a, axis: int, size: int) -> Tensor:
    """Insert a new axis and repeat the tensor ``size`` times along it."""
    a = as_tensor(a)
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), size, axis=ax)
    return _node(out, (a,), lambda g: (g.sum(axis=ax),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(dtype=a.dtype).reshape(()), (a,), lambda g: (np.full(a.shape, g, a.dtype),))


def mean_over_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    return _node(a.data.mean(axis=ax), (a,),
                 lambda g: (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),))


def max_over_axis(a, axis: int) -> Tensor:
    """Maximum along an axis; the gradient flows only to the first maximizer."""
    a = as_tensor(a)
    ax = axis % a.ndim
    out = a.data.max(axis=ax)

    def backward(g):
        arg = np.expand_dims(np.argmax(a.data, axis=ax), ax)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, arg, np.expand_dims(g, ax), ax)
        return (ga,)
    return _node(out, (a,), backward)


def _check_index(idx, n):
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise BoundsError(f"indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise BoundsError(f"index out of range [0, {n}): min {idx.min()}, max {idx.max()}")
    return idx


def _batch_rows(idx):
    return np.arange(idx.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))


def _gather_data(x, idx):
    if x.ndim == 2:
        return x[idx]
    return x[_batch_rows(idx), idx]


def gather(x, idx) -> Tensor:
    """Rows of ``x`` selected by ``idx``.

    ``x`` is (N, C) with any integer index array, or (B, N, C) with an index
    array whose first axis is the batch: the result is (*idx.shape, C).
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"gather expects (N, C) or (B, N, C), got {x.shape}")
    n = x.shape[-2]
    idx = _check_index(idx, n)
    if x.ndim == 3 and (idx.ndim < 1 or idx.shape[0] != x.shape[0]):
        raise ShapeError(f"gather: batch axis of indices {idx.shape} does not match {x.shape}")
    return _node(_gather_data(x.data, idx), (x,), lambda g: (scatter_add_array(g, idx, n, x.ndim == 3),))


def scatter_add_array(y, idx, n, batched):
    c = y.shape[-1]
    if y.shape[:-1] != idx.shape:
        raise ShapeError(f"scatter_add: values {y.shape} do not match indices {idx.shape}")
    flat = idx.reshape(-1)
    rows = n
    if batched:
        flat = (idx + n * _batch_rows(idx)).reshape(-1)
        rows = n * idx.shape[0]
    e = flat.size
    mat = sp.csc_matrix((np.ones(e, dtype=y.dtype), flat, np.arange(e + 1)), shape=(rows, e))
    out = np.asarray(mat @ y.reshape(e, c), dtype=y.dtype)
    return out.reshape((idx.shape[0], n, c) if batched else (n, c))


def scatter_add(y, idx, n: int, batched: bool | None = None) -> Tensor:
    """Sum rows of ``y`` into ``n`` slots given by ``idx`` (adjoint of :func:`gather`)."""
    y = as_tensor(y)
    idx = _check_index(idx, n)
    if batched is None:
        batched = idx.ndim >= 2 and y.ndim >= 3
    return _node(scatter_add_array(y.data, idx, n, batched), (y,),
                 lambda g: (_gather_data(g, idx),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(slope)
    if not 0 <= s <= 1:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")
    out = a.data * s
    np.maximum(a.data, out, out=out)  # max(x, s x) equals the leaky ReLU for s <= 1

    def backward(g):
        m = (a.data > 0).astype(g.dtype)
        m *= 1 - s
        m += s
        return (g * m,)
    return _node(out, (a,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode the batch statistics are used and the running buffers are
    updated in place as ``r <- momentum * r + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: input {x.shape} vs scale {gamma.shape} / shift {beta.shape}")
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]
    dt = x.dtype.type
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = (flat - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        k = gamma.data * inv
        if training:
            gx = xhat * (ggamma / m)
            np.subtract(g2, gx, out=gx)
            gx -= gbeta / m
            gx *= k
        else:
            gx = g2 * k
        return gx.reshape(x.shape), ggamma, gbeta
    return _node(out, (x, gamma, beta), backward)


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate); identity in eval."""
    a = as_tensor(a)
    if not training or rate == 0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = rng.random(a.shape) >= rate
    mask = keep.astype(a.dtype) / a.dtype.type(1.0 - rate)
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    _check_index(labels, logits.shape[1])
    b = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)
    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
