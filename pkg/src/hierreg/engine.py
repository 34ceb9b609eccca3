"""Minimal reverse-mode autodiff on numpy arrays.

Tensors store float64 data; graphs are only recorded when some input
requires gradients, so inference-time code pays no tape overhead.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "concat", "softmax", "atan2", "no_grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor data must be finite")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def backward(self, grad=None):
        """Accumulate gradients of a scalar (or seeded) output into leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._coerce(other)
        return Tensor._make(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._coerce(other)
        return Tensor._make(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape),
                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._coerce(other)
        return Tensor._make(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape),
                       _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, exponent: float):
        a, e = self, float(exponent)
        return Tensor._make(
            a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))

    def __matmul__(self, other):
        a, b = self, Tensor._coerce(other)

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else \
                np.expand_dims(g, -1) * b.data
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 and b.ndim > 1 \
                else None
            if gb is None:
                if b.ndim == 1:  # matrix @ vector
                    gb = np.swapaxes(a.data, -1, -2) @ g
                else:
                    gb = np.outer(a.data, g)
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor._make(a.data @ b.data, (a, b), vjp)

    # -- reductions and shaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims=False):
        """Max along one axis; gradient routes to the first argmax."""
        a = self
        idx = np.argmax(a.data, axis=axis)

        def vjp(g):
            out = np.zeros_like(a.data)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(out, np.expand_dims(idx, axis), gg, axis=axis)
            return (out,)

        return Tensor._make(a.data.max(axis=axis, keepdims=keepdims), (a,), vjp)

    def reshape(self, *shape):
        a = self
        return Tensor._make(
            a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def swapaxes(self, ax1, ax2):
        a = self
        return Tensor._make(
            np.swapaxes(a.data, ax1, ax2), (a,),
            lambda g: (np.swapaxes(g, ax1, ax2),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, key):
        a = self

        def vjp(g):
            out = np.zeros_like(a.data)
            np.add.at(out, key, g)
            return (out,)

        return Tensor._make(a.data[key].copy(), (a,), vjp)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * 0.5 / out_data,))

    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))

    def sigmoid(self):
        a = self
        out_data = np.where(a.data >= 0,
                            1.0 / (1.0 + np.exp(-np.abs(a.data))),
                            np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        return Tensor._make(out_data, (a,),
                            lambda g: (g * out_data * (1.0 - out_data),))

    def softplus(self):
        a = self
        out_data = np.logaddexp(0.0, a.data)
        sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
        return Tensor._make(out_data, (a,), lambda g: (g * sig,))

    def cos(self):
        a = self
        return Tensor._make(np.cos(a.data), (a,),
                            lambda g: (-g * np.sin(a.data),))

    def sin(self):
        a = self
        return Tensor._make(np.sin(a.data), (a,),
                            lambda g: (g * np.cos(a.data),))

    def clip_min(self, lo: float):
        """Elementwise max with a constant; zero gradient where clipped."""
        a = self
        mask = a.data > lo
        return Tensor._make(np.maximum(a.data, lo), (a,),
                            lambda g: (g * mask,))

    def norm(self, axis=None, keepdims=False, eps=1e-12):
        """Euclidean norm, smoothed at zero by `eps` inside the sqrt."""
        return ((self * self).sum(axis=axis, keepdims=keepdims) + eps).sqrt()

    def item(self) -> float:
        return float(self.data)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along `axis`."""
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))
    e = (logits - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = Tensor._coerce(y), Tensor._coerce(x)
    r2 = y.data ** 2 + x.data ** 2
    safe = np.maximum(r2, 1e-18)

    def vjp(g):
        return (_unbroadcast(g * x.data / safe, y.shape),
                _unbroadcast(-g * y.data / safe, x.shape))

    return Tensor._make(np.arctan2(y.data, x.data), (y, x), vjp)


class no_grad:
    """Context marking parameters as frozen; re-enables on exit."""

    def __init__(self, params):
        self.params = list(params)
        self._saved = []

    def __enter__(self):
        self._saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, r in zip(self.params, self._saved):
            p.requires_grad = r
        return False
