"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op here dispatches on its inputs: with plain ndarrays/scalars it
returns a plain ndarray (zero overhead inference path); with at least one
Tensor it returns a Tensor carrying the vector-Jacobian closure.  Model
forward passes are therefore written once and serve both inference and
training.

The op set is exactly what the separator, the score model, and the three
training losses need; this is not a general-purpose framework.
"""

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    """A node in the backward graph: value plus accumulated gradient."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad over the whole graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def value(x):
    """Plain ndarray view of a Tensor or array-like."""
    return _data(x)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _op(out_data, *pairs):
    """Build a Tensor from (input, vjp_fn) pairs, or a plain array if no
    input is a Tensor."""
    parents = tuple(t for t, _ in pairs if isinstance(t, Tensor))
    if not parents:
        return out_data
    fns = tuple(f for t, f in pairs if isinstance(t, Tensor))

    def vjp(g):
        return tuple(f(g) for f in fns)

    return Tensor(out_data, parents, vjp)


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    da, db = _data(a), _data(b)
    return _op(
        da + db,
        (a, lambda g: _unbroadcast(g, da.shape)),
        (b, lambda g: _unbroadcast(g, db.shape)),
    )


def sub(a, b):
    da, db = _data(a), _data(b)
    return _op(
        da - db,
        (a, lambda g: _unbroadcast(g, da.shape)),
        (b, lambda g: _unbroadcast(-g, db.shape)),
    )


def mul(a, b):
    da, db = _data(a), _data(b)
    return _op(
        da * db,
        (a, lambda g: _unbroadcast(g * db, da.shape)),
        (b, lambda g: _unbroadcast(g * da, db.shape)),
    )


def div(a, b):
    da, db = _data(a), _data(b)
    return _op(
        da / db,
        (a, lambda g: _unbroadcast(g / db, da.shape)),
        (b, lambda g: _unbroadcast(-g * da / (db * db), db.shape)),
    )


def matmul(a, b):
    """a @ b with a of ndim >= 2 and b strictly 2-D (activations @ weights).

    Higher-rank a is flattened so the product runs as a single GEMM.
    """
    da, db = _data(a), _data(b)
    if db.ndim != 2 or da.ndim < 2:
        raise ShapeError(f"matmul expects (..., k) @ (k, m), got {da.shape} @ {db.shape}")
    a2 = da.reshape(-1, da.shape[-1])
    out = (a2 @ db).reshape(*da.shape[:-1], db.shape[1])

    def vjp_a(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ db.T).reshape(da.shape)

    def vjp_b(g):
        return a2.T @ g.reshape(-1, g.shape[-1])

    return _op(out, (a, vjp_a), (b, vjp_b))


def power(a, p):
    da = _data(a)
    p = float(p)
    return _op(da**p, (a, lambda g: g * p * da ** (p - 1.0)))


def square(a):
    da = _data(a)
    return _op(da * da, (a, lambda g: g * 2.0 * da))


def sqrt(a):
    da = _data(a)
    out = np.sqrt(da)
    return _op(out, (a, lambda g: g * 0.5 / out))


def exp(a):
    out = np.exp(_data(a))
    return _op(out, (a, lambda g: g * out))


def log(a):
    da = _data(a)
    return _op(np.log(da), (a, lambda g: g / da))


def tanh(a):
    out = np.tanh(_data(a))
    return _op(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a):
    da = _data(a)
    out = np.empty_like(da)
    pos = da >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-da[pos]))
    ex = np.exp(da[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (a, lambda g: g * out * (1.0 - out)))


def softplus(a):
    da = _data(a)
    out = np.logaddexp(0.0, da)
    sig = 1.0 / (1.0 + np.exp(-np.clip(da, -60.0, 60.0)))
    return _op(out, (a, lambda g: g * sig))


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first argument."""
    da, db = _data(a), _data(b)
    mask = da >= db
    return _op(
        np.where(mask, da, db),
        (a, lambda g: _unbroadcast(g * mask, da.shape)),
        (b, lambda g: _unbroadcast(g * ~mask, db.shape)),
    )


# -- reductions and shape ops ------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    da = _data(a)
    out = da.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, da.shape)

    return _op(out, (a, vjp))


def mean(a, axis=None, keepdims=False):
    da = _data(a)
    out = da.mean(axis=axis, keepdims=keepdims)
    count = da.size if axis is None else da.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, da.shape)

    return _op(out, (a, vjp))


def reshape(a, shape):
    da = _data(a)
    return _op(da.reshape(shape), (a, lambda g: g.reshape(da.shape)))


def take(a, key):
    da = _data(a)

    def vjp(g):
        z = np.zeros_like(da)
        np.add.at(z, key, g)
        return z

    return _op(da[key], (a, vjp))


def concat(parts, axis):
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _op(out, *[(p, make_vjp(i)) for i, p in enumerate(parts)])


def pad_axis(a, axis, before, after):
    """Zero-pad along one axis."""
    da = _data(a)
    widths = [(0, 0)] * da.ndim
    widths[axis] = (before, after)
    core = [slice(None)] * da.ndim
    core[axis] = slice(before, before + da.shape[axis])
    core = tuple(core)
    return _op(np.pad(da, widths), (a, lambda g: g[core]))


def softmax(a, axis):
    da = _data(a)
    shifted = da - da.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _op(s, (a, vjp))


def stack_last(parts):
    """Stack equal-shaped arrays along a new trailing axis."""
    expanded = [reshape(p, (*_data(p).shape, 1)) for p in parts]
    return concat(expanded, axis=-1)


def check_finite_scalar(x, context: str) -> float:
    """Return a Tensor/array scalar as float, or raise NumericError."""
    v = float(_data(x))
    if not np.isfinite(v):
        raise NumericError(f"non-finite value in {context}: {v}")
    return v
