"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: every operation returns a new ``Tensor`` holding the forward
value, the parent tensors, and a vector-Jacobian-product closure. Calling
``backward()`` on a scalar output walks the graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires gradients.

Everything runs in float64. Operations whose inputs do not require
gradients record nothing, so inference paths pay only the numpy cost.
Rendering kernels plug in through :func:`from_op` with hand-derived
adjoints; correctness of every adjoint is gated by finite differences in
the test suite.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def _needs(t):
    return t.requires_grad or t._vjp is not None


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs(p):
                stack.append((p, False))
    return order[::-1]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data, parents, vjp):
    """Build a graph node with an explicit vector-Jacobian product.

    ``vjp(grad_out) -> tuple`` must return one gradient array (or None)
    per parent, already shaped like the parent's data.
    """
    out = Tensor(data)
    if any(_needs(p) for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return from_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return from_op(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data**p
    return from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return from_op(out, (a, b), vjp)


# -- elementwise ------------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a):
    a = as_tensor(a)
    return from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return from_op(np.cos(a.data), (a,), lambda g: (g * -np.sin(a.data),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: (g * 0.5 / out,))


def arccos(a):
    a = as_tensor(a)
    return from_op(
        np.arccos(a.data), (a,), lambda g: (-g / np.sqrt(1.0 - a.data * a.data),)
    )


def arctan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    denom = y.data * y.data + x.data * x.data
    # Convention: gradient 0 at the (0, 0) singularity, where atan2 itself is 0.
    safe = np.where(denom == 0.0, 1.0, denom)

    def vjp(g):
        gy = np.where(denom == 0.0, 0.0, g * x.data / safe)
        gx = np.where(denom == 0.0, 0.0, g * -y.data / safe)
        return _unbroadcast(gy, y.data.shape), _unbroadcast(gx, x.data.shape)

    return from_op(np.arctan2(y.data, x.data), (y, x), vjp)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def absolute(a):
    a = as_tensor(a)
    # Subgradient 0 at exactly 0.
    s = np.sign(a.data)
    return from_op(np.abs(a.data), (a,), lambda g: (g * s,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return from_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        ),
    )


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data
    return from_op(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.data.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.data.shape),
        ),
    )


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data
    return from_op(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.data.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.data.shape),
        ),
    )


# -- reductions and shaping --------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return from_op(out, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    return from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return from_op(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),)
    )


def take(a, idx):
    """Indexing/gather. ``idx`` may be any numpy index expression."""
    a = as_tensor(a)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return from_op(a.data[idx], (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return from_op(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


def cross3(a, b):
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.cross(a.data, b.data)

    def vjp(g):
        ga = np.cross(b.data, g)
        gb = np.cross(g, a.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return from_op(out, (a, b), vjp)


def dot_last(a, b):
    """Inner product along the last axis, keepdims."""
    return sum_(mul(a, b), axis=-1, keepdims=True)


def norm_last(a, eps=0.0):
    """Euclidean norm along the last axis, keepdims."""
    return sqrt(add(sum_(mul(a, a), axis=-1, keepdims=True), eps))


def normalize_last(a, eps=1e-30):
    return div(a, norm_last(a, eps=eps))


def sparse_matmul(mat, x):
    """``mat @ x`` for a constant scipy sparse matrix; gradient is ``mat.T @ g``."""
    x = as_tensor(x)
    mt = mat.T.tocsr()
    return from_op(np.asarray(mat @ x.data), (x,), lambda g: (np.asarray(mt @ g),))
