"""Reverse-mode autograd over numpy arrays.

Every Tensor holds float64 data so finite-difference gradient checks are
meaningful. Graph nodes record a closure that pushes ``out.grad`` back into
their parents; ``backward`` walks the graph in reverse topological order.
"""

import contextlib

import numpy as np

NEG_INF = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference and finite differences)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, op):
    requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires_grad,
                  _children=parents if requires_grad else (), _op=op)


class Tensor:
    # numpy defers to our reflected operators (array * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _children=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = lambda: None
        self._prev = tuple(_children)
        self._op = _op

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, grad=None):
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            node._backward()

    # ----------------- Arithmetic -----------------
    def __add__(self, other):
        other = _as_tensor(other)
        out = _result(self.data + other.data, (self, other), "+")

        def _backward():
            self._accumulate(out.grad)
            other._accumulate(out.grad)

        out._backward = _backward
        return out

    def __radd__(self, other):
        return self + other

    def __neg__(self):
        out = _result(-self.data, (self,), "neg")

        def _backward():
            self._accumulate(-out.grad)

        out._backward = _backward
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _result(self.data * other.data, (self, other), "*")

        def _backward():
            self._accumulate(other.data * out.grad)
            other._accumulate(self.data * out.grad)

        out._backward = _backward
        return out

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _result(self.data / other.data, (self, other), "/")

        def _backward():
            self._accumulate(out.grad / other.data)
            other._accumulate(-out.grad * self.data / (other.data ** 2))

        out._backward = _backward
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        out = _result(self.data ** exponent, (self,), f"**{exponent}")

        def _backward():
            self._accumulate(exponent * self.data ** (exponent - 1) * out.grad)

        out._backward = _backward
        return out

    def __matmul__(self, other):
        other = _as_tensor(other)
        out = _result(np.matmul(self.data, other.data), (self, other), "@")

        def _backward():
            self._accumulate(np.matmul(out.grad, np.swapaxes(other.data, -1, -2)))
            other._accumulate(np.matmul(np.swapaxes(self.data, -1, -2), out.grad))

        out._backward = _backward
        return out

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    # ----------------- Reductions and shape -----------------
    def sum(self, axis=None, keepdims=False):
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward():
            grad = out.grad
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            self._accumulate(grad * np.ones_like(self.data))

        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        out = _result(self.data.reshape(*shape), (self,), "reshape")

        def _backward():
            self._accumulate(out.grad.reshape(self.data.shape))

        out._backward = _backward
        return out

    def transpose(self, *axes):
        out = _result(self.data.transpose(*axes), (self,), "transpose")

        def _backward():
            self._accumulate(out.grad.transpose(np.argsort(axes)))

        out._backward = _backward
        return out

    def __getitem__(self, key):
        out = _result(self.data[key], (self,), "getitem")

        def _backward():
            grad = np.zeros_like(self.data)
            np.add.at(grad, key, out.grad)
            self._accumulate(grad)

        out._backward = _backward
        return out

    # ----------------- Elementwise -----------------
    def exp(self):
        out = _result(np.exp(self.data), (self,), "exp")

        def _backward():
            self._accumulate(out.data * out.grad)

        out._backward = _backward
        return out

    def log(self):
        out = _result(np.log(self.data), (self,), "log")

        def _backward():
            self._accumulate(out.grad / self.data)

        out._backward = _backward
        return out

    def tanh(self):
        out = _result(np.tanh(self.data), (self,), "tanh")

        def _backward():
            self._accumulate((1.0 - out.data ** 2) * out.grad)

        out._backward = _backward
        return out

    def gelu(self):
        # tanh approximation
        c = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = np.tanh(c * (x + 0.044715 * x ** 3))
        out = _result(0.5 * x * (1.0 + inner), (self,), "gelu")

        def _backward():
            d_inner = (1.0 - inner ** 2) * c * (1.0 + 3 * 0.044715 * x ** 2)
            self._accumulate((0.5 * (1.0 + inner) + 0.5 * x * d_inner) * out.grad)

        out._backward = _backward
        return out

    def masked_fill(self, mask, value=NEG_INF):
        mask = np.asarray(mask, dtype=bool)
        out = _result(np.where(mask, value, self.data), (self,), "masked_fill")

        def _backward():
            self._accumulate(np.where(mask, 0.0, out.grad))

        out._backward = _backward
        return out

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        exps = np.exp(shifted)
        probs = exps / exps.sum(axis=axis, keepdims=True)
        out = _result(probs, (self,), "softmax")

        def _backward():
            g = out.grad
            self._accumulate(probs * (g - (g * probs).sum(axis=axis, keepdims=True)))

        out._backward = _backward
        return out

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        logp = shifted - lse
        out = _result(logp, (self,), "log_softmax")

        def _backward():
            g = out.grad
            self._accumulate(g - np.exp(logp) * g.sum(axis=axis, keepdims=True))

        out._backward = _backward
        return out

    def pick(self, index):
        """out[...] = self[..., index[...]] along the last axis."""
        index = np.asarray(index, dtype=np.int64)
        out = _result(np.take_along_axis(self.data, index[..., None], axis=-1)[..., 0],
                      (self,), "pick")

        def _backward():
            grad = np.zeros_like(self.data)
            np.put_along_axis(grad, index[..., None], out.grad[..., None], axis=-1)
            self._accumulate(grad)

        out._backward = _backward
        return out


# ----------------- Functional helpers -----------------
def take(table, index):
    """Row lookup ``table[index]`` (embedding tables)."""
    index = np.asarray(index, dtype=np.int64)
    out = _result(table.data[index], (table,), "take")

    def _backward():
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, out.grad)
        table._accumulate(grad)

    out._backward = _backward
    return out


def gather_rows(x, index):
    """Batched row gather: out[b, j] = x[b, index[b, j]] for x of shape (B, L, d)."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]
    out = _result(x.data[rows, index], (x,), "gather_rows")

    def _backward():
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, index), out.grad)
        x._accumulate(grad)

    out._backward = _backward
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")

    def _backward():
        bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
        for t, grad in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            t._accumulate(grad)

    out._backward = _backward
    return out


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
