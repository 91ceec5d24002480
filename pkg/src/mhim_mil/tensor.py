"""Dense rank<=2 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside of a tape nothing is recorded,
which is how gradient-free forwards (the teacher, evaluation) are run.

Example
-------
>>> w = Tensor([[3.0, -2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_all(w * w)
>>> tape.backward(loss)
>>> w.grad
array([[ 6., -4.]])
"""

from __future__ import annotations

import contextvars
import hashlib
from collections.abc import Mapping
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonPositiveTemperature, NonScalarLoss, ShapeMismatch

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A float64 array of rank 0, 1 or 2 with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeMismatch(f"rank {arr.ndim} > 2 is not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so the node list is already a
    topological order; :meth:`backward` walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def leaves(self) -> list[Tensor]:
        produced = {id(n.out) for n in self.nodes}
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, loss: Tensor) -> None:
        """Store dloss/dleaf in ``.grad`` of every requires_grad leaf on the tape.

        Leaves that do not reach ``loss`` receive zeros.  Existing ``.grad``
        buffers are overwritten, not accumulated into.
        """
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
        if loss.requires_grad and not self.nodes:
            loss.grad = np.ones_like(loss.data)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _make(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, True)
        tape.record(out, inputs, vjp)
        return out
    return Tensor._wrap(data, False)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """``x + row`` where ``row`` (1xP) is repeated over the M rows of ``x``."""
    x, row = as_tensor(x), as_tensor(row)
    if x.data.ndim != 2 or row.shape != (1, x.shape[1]):
        raise ShapeMismatch(f"add_row: {x.shape} and {row.shape}")
    return _make(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0, keepdims=True)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose needs rank 2, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Row slice ``a[start:stop]``."""
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if len({p.shape[1] for p in parts}) != 1:
        raise ShapeMismatch("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _make(np.vstack([p.data for p in parts]), parts,
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeMismatch("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _make(np.hstack([p.data for p in parts]), parts,
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


# ---------------------------------------------------------------- softmax

def _check_rows(x: Tensor, temperature: float, op: str) -> None:
    if not temperature > 0:
        raise NonPositiveTemperature(f"{op}: temperature must be > 0, got {temperature}")
    if x.data.ndim != 2:
        raise ShapeMismatch(f"{op} needs rank 2, got {x.shape}")


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax of ``x / temperature`` along each row (row-max stabilised)."""
    x = as_tensor(x)
    _check_rows(x, temperature, "row_softmax")
    t = float(temperature)
    z = x.data / t
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return ((y * (g - (g * y).sum(axis=1, keepdims=True))) / t,)

    return _make(y, (x,), vjp)


def row_log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Log-softmax of ``x / temperature`` computed in log space."""
    x = as_tensor(x)
    _check_rows(x, temperature, "row_log_softmax")
    t = float(temperature)
    z = x.data / t
    shifted = z - z.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g):
        return ((g - np.exp(y) * g.sum(axis=1, keepdims=True)) / t,)

    return _make(y, (x,), vjp)


# ---------------------------------------------------------------- parameters

class ParameterSet(Mapping):
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, entries: Mapping | None = None):
        self._entries: dict[str, Tensor] = {}
        self._order: list[str] = []
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        self._order = sorted(self._entries)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        inner = ", ".join(f"{k}: {self[k].shape}" for k in self)
        return f"ParameterSet({inner})"

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: Tensor(self[k].data.copy()) for k in self})

    def shapes(self) -> dict:
        return {k: self[k].shape for k in self}

    def compatible(self, other: "ParameterSet") -> bool:
        return list(self) == list(other) and self.shapes() == other.shapes()

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (self[k].grad if self[k].grad is not None else np.zeros_like(self[k].data))
                for k in self}

    def flatten(self) -> np.ndarray:
        return np.concatenate([self[k].data.ravel() for k in self]) if len(self) else np.zeros(0)

    def load_flat(self, vector: np.ndarray) -> None:
        pos = 0
        for k in self:
            t = self[k]
            n = t.data.size
            t.data = np.asarray(vector[pos:pos + n], dtype=np.float64).reshape(t.shape).copy()
            pos += n

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in self:
            h.update(k.encode())
            h.update(repr(self[k].shape).encode())
            h.update(np.ascontiguousarray(self[k].data).tobytes())
        return h.hexdigest()


def finite_diff_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet,
                      h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic and build its loss from the tensors in
    ``params``.  Parameter values are restored on return.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)
    worst = 0.0
    for name in params:
        t = params[name]
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(params).item()
            flat[i] = orig - h
            down = f(params).item()
            flat[i] = orig
            g_fd = (up - down) / (2.0 * h)
            ga = g_ad.reshape(-1)[i]
            err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
            worst = max(worst, err)
    return worst
