"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output adjoint to input adjoints. :func:`backward` orders
the graph below a scalar root into a :class:`Tape` and sweeps it once.
"""
from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class DetachedGraphWarning(UserWarning):
    """The root does not depend on any requested leaf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    """Wrap a primitive's result; inputs that need no gradient are dropped."""
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward, op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float):
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def identity(a):
    return as_tensor(a)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tsum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def log_softmax(a):
    """Row-wise log-softmax along the last axis, max-stabilized."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,),
                 lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(a):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def frobenius_sq(a):
    a = as_tensor(a)
    return _make(np.sum(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,), "frobenius_sq")


def inverse(a):
    """Matrix inverse, intended for SPD inputs; ``d(A^-1) = -A^-1 dA A^-1``."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inverse: expected a square matrix, got shape {a.shape}")
    out = np.linalg.inv(a.data)
    return _make(out, (a,), lambda g: (-(out.T @ g @ out.T),), "inverse")


def diag(a):
    """Main diagonal of a square matrix as a vector."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag: expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    return _make(np.diagonal(a.data).copy(), (a,), lambda g: (np.diag(g) if n else g,), "diag")


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": power,
    "matmul": matmul, "transpose": transpose, "reshape": reshape,
    "relu": relu, "tanh": tanh, "exp": exp, "log": log, "sqrt": sqrt,
    "sum": tsum, "mean": mean, "softmax": softmax, "log_softmax": log_softmax,
    "frobenius_sq": frobenius_sq, "inverse": inverse, "diag": diag,
}


# ---------------------------------------------------------------- tape / sweep

class Tape:
    """Topologically ordered list of the nodes below a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def sweep(self, root: Tensor) -> dict[int, np.ndarray]:
        adj = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None) if node._parents else adj.get(id(node))
            if g is None or not node._parents:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in adj:
                    adj[id(parent)] = adj[id(parent)] + pg
                else:
                    adj[id(parent)] = pg
        return adj


def backward(root: Tensor, wrt: Sequence[Tensor] | None = None) -> bool:
    """Populate ``.grad`` on every leaf below ``root``.

    Leaves listed in ``wrt`` that the root does not depend on receive zero
    gradients. Returns ``False`` (and warns) when no requested leaf is
    connected to the root.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    tape = Tape.from_root(root)
    adj = tape.sweep(root)
    for node in tape.nodes:
        if not node._parents:
            node.grad = adj.get(id(node), np.zeros_like(node.data))
    connected = True
    if wrt is not None:
        hit = False
        for leaf in wrt:
            if id(leaf) in adj:
                hit = True
            else:
                leaf.grad = np.zeros_like(leaf.data)
        connected = hit
    elif not any(not n._parents for n in tape.nodes):
        connected = False
    if not connected:
        warnings.warn("backward: root is detached from the requested leaves", DetachedGraphWarning,
                      stacklevel=2)
    return connected


def grad(fn: Callable[..., Tensor], *arrays) -> tuple[float, list[np.ndarray]]:
    """Value and gradients of a scalar function of numpy arrays."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in arrays]
    out = fn(*leaves)
    backward(out, leaves)
    return float(out.data), [leaf.grad for leaf in leaves]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` per coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative discrepancy ``||a-b|| / max(||a||, ||b||)``."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
