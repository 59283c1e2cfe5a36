"""Small reverse-mode autodiff over numpy arrays.

``Tensor`` records a graph and back-propagates gradients to leaves created
with ``requires_grad=True``.  ``Dual`` carries a forward-mode tangent on top
of any operand type (float, ndarray or Tensor); because its tangent is built
from ordinary ops, a tangent made of Tensors is itself differentiable.  That
is how the derivative of the prediction with respect to the time input ends
up inside a loss that reverse mode can differentiate.

The module-level math functions (``sin``, ``tanh``, ``matmul`` ...) dispatch
on operand type so the same model code runs on plain numpy, on Tensors and on
Duals.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Dual", "value", "sin", "cos", "arctan", "tanh", "sigmoid",
    "exp", "matmul", "concat", "stack", "inv", "clip", "swap", "total", "mean",
]


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


class Tensor:
    """An ndarray node in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------
    @staticmethod
    def _node(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _toposort(self):
        order, seen, stack = [], set(), [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if not self.requires_grad:
            return
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=float)
        pending = {id(self): seed}
        for node in reversed(self._toposort()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    def detach(self):
        return Tensor(self.data)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data
        return Tensor._node(a + b, (self, o),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data
        return Tensor._node(a - b, (self, o),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data

        def back(g):
            return (_unbroadcast(g * b, a.shape) if self.requires_grad else None,
                    _unbroadcast(g * a, b.shape) if o.requires_grad else None)
        return Tensor._node(a * b, (self, o), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data
        out = a / b

        def back(g):
            return (_unbroadcast(g / b, a.shape) if self.requires_grad else None,
                    _unbroadcast(-g * out / b, b.shape) if o.requires_grad else None)
        return Tensor._node(out, (self, o), back)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return Tensor._node(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if self.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if o.requires_grad else None
            return ga, gb
        return Tensor._node(a @ b, (self, o), back)

    def __rmatmul__(self, other):
        return Tensor(other) @ self

    def __getitem__(self, idx):
        shape = self.data.shape
        basic = _is_basic_index(idx)

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)
        return Tensor._node(self.data[idx], (self,), back)

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._node(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions -------------------------------------------
    def _unary(self, out, dfun):
        a = self.data
        return Tensor._node(out, (self,), lambda g: (g * dfun(a, out),))


class Dual:
    """A value with a forward-mode tangent; ``tan is None`` means zero."""

    __slots__ = ("val", "tan")
    __array_ufunc__ = None

    def __init__(self, val, tan=None):
        self.val = val
        self.tan = tan

    @property
    def shape(self):
        return np.shape(value(self.val))

    def __len__(self):
        return len(value(self.val))

    def __repr__(self):
        return f"Dual({self.val!r}, tan={self.tan!r})"

    def __add__(self, other):
        o = _lift(other)
        return Dual(self.val + o.val, _tadd(self.tan, o.tan))

    __radd__ = __add__

    def __sub__(self, other):
        o = _lift(other)
        return Dual(self.val - o.val, _tadd(self.tan, None if o.tan is None else -o.tan))

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        o = _lift(other)
        t1 = None if self.tan is None else self.tan * o.val
        t2 = None if o.tan is None else self.val * o.tan
        return Dual(self.val * o.val, _tadd(t1, t2))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _lift(other)
        out = self.val / o.val
        t1 = None if self.tan is None else self.tan / o.val
        t2 = None if o.tan is None else -(out * o.tan) / o.val
        return Dual(out, _tadd(t1, t2))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return Dual(-self.val, None if self.tan is None else -self.tan)

    def __pow__(self, p):
        t = None if self.tan is None else (p * self.val ** (p - 1)) * self.tan
        return Dual(self.val ** p, t)

    def __matmul__(self, other):
        o = _lift(other)
        t1 = None if self.tan is None else self.tan @ o.val
        t2 = None if o.tan is None else self.val @ o.tan
        return Dual(self.val @ o.val, _tadd(t1, t2))

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, idx):
        return Dual(self.val[idx], None if self.tan is None else self.tan[idx])

    def reshape(self, *shape):
        return Dual(self.val.reshape(*shape), None if self.tan is None else self.tan.reshape(*shape))

    def sum(self, axis=None, keepdims=False):
        return Dual(total(self.val, axis, keepdims),
                    None if self.tan is None else total(self.tan, axis, keepdims))

    def mean(self, axis=None, keepdims=False):
        return Dual(mean(self.val, axis, keepdims),
                    None if self.tan is None else mean(self.tan, axis, keepdims))


def _lift(x):
    return x if isinstance(x, Dual) else Dual(x)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def value(x):
    """Strip Dual and Tensor wrappers down to the primal ndarray/float."""
    while True:
        if isinstance(x, Dual):
            x = x.val
        elif isinstance(x, Tensor):
            return x.data
        else:
            return x


# -- dispatching math ----------------------------------------------------

def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), None if x.tan is None else cos(x.val) * x.tan)
    if isinstance(x, Tensor):
        return x._unary(np.sin(x.data), lambda a, o: np.cos(a))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), None if x.tan is None else -sin(x.val) * x.tan)
    if isinstance(x, Tensor):
        return x._unary(np.cos(x.data), lambda a, o: -np.sin(a))
    return np.cos(x)


def arctan(x):
    if isinstance(x, Dual):
        return Dual(arctan(x.val), None if x.tan is None else x.tan / (1.0 + x.val * x.val))
    if isinstance(x, Tensor):
        return x._unary(np.arctan(x.data), lambda a, o: 1.0 / (1.0 + a * a))
    return np.arctan(x)


def tanh(x):
    if isinstance(x, Dual):
        out = tanh(x.val)
        return Dual(out, None if x.tan is None else (1.0 - out * out) * x.tan)
    if isinstance(x, Tensor):
        return x._unary(np.tanh(x.data), lambda a, o: 1.0 - o * o)
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Dual):
        out = sigmoid(x.val)
        return Dual(out, None if x.tan is None else (out * (1.0 - out)) * x.tan)
    if isinstance(x, Tensor):
        return x._unary(expit(x.data), lambda a, o: o * (1.0 - o))
    return expit(x)


def exp(x):
    if isinstance(x, Dual):
        out = exp(x.val)
        return Dual(out, None if x.tan is None else out * x.tan)
    if isinstance(x, Tensor):
        return x._unary(np.exp(x.data), lambda a, o: o)
    return np.exp(x)


def matmul(a, b):
    return a @ b


def swap(x):
    """Transpose the last two axes."""
    if isinstance(x, Dual):
        return Dual(swap(x.val), None if x.tan is None else swap(x.tan))
    if isinstance(x, Tensor):
        return Tensor._node(np.swapaxes(x.data, -1, -2), (x,),
                            lambda g: (np.swapaxes(g, -1, -2),))
    return np.swapaxes(x, -1, -2)


def total(x, axis=None, keepdims=False):
    if isinstance(x, (Tensor, Dual)):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if isinstance(x, (Tensor, Dual)):
        return x.mean(axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def _join(xs, axis, npfun):
    if any(isinstance(x, Dual) for x in xs):
        duals = [_lift(x) for x in xs]
        vals = [d.val for d in duals]
        if all(d.tan is None for d in duals):
            return Dual(_join(vals, axis, npfun))
        tans = [np.zeros(np.shape(value(d.val))) if d.tan is None else d.tan for d in duals]
        return Dual(_join(vals, axis, npfun), _join(tans, axis, npfun))
    if any(isinstance(x, Tensor) for x in xs):
        ts = [x if isinstance(x, Tensor) else Tensor(x) for x in xs]
        out = npfun([t.data for t in ts], axis=axis)
        if npfun is np.concatenate:
            ax = axis % out.ndim
            cuts = np.cumsum([t.data.shape[ax] for t in ts])[:-1]
            return Tensor._node(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)))
        ax = axis % out.ndim
        return Tensor._node(out, tuple(ts),
                            lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))
    return npfun(xs, axis=axis)


def concat(xs, axis=-1):
    return _join(list(xs), axis, np.concatenate)


def stack(xs, axis=-1):
    return _join(list(xs), axis, np.stack)


def inv(x):
    """Batched matrix inverse over the last two axes."""
    if isinstance(x, Dual):
        out = inv(x.val)
        return Dual(out, None if x.tan is None else -(out @ x.tan @ out))
    if isinstance(x, Tensor):
        out = np.linalg.inv(x.data)
        return Tensor._node(out, (x,), lambda g: (-(np.swapaxes(out, -1, -2) @ g
                                                     @ np.swapaxes(out, -1, -2)),))
    return np.linalg.inv(x)


def clip(x, lo, hi):
    """Clamp values; gradient passes only where the clamp is inactive."""
    if isinstance(x, Dual):
        v = value(x.val)
        inside = (v > lo) & (v < hi)
        return Dual(clip(x.val, lo, hi), None if x.tan is None else x.tan * inside)
    if isinstance(x, Tensor):
        a = x.data
        inside = (a > lo) & (a < hi)
        return Tensor._node(np.clip(a, lo, hi), (x,), lambda g: (g * inside,))
    return np.clip(x, lo, hi)
