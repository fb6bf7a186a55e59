"""Small define-by-run reverse-mode differentiation engine over float64 arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` replays
those closures in reverse topological order.  Broadcasting is limited to a
scalar operand against a tensor; the only exception is :func:`affine`, which
adds a bias row to every row of a matrix.
"""
from __future__ import annotations

import base64
import json
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "stop_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.stop_grad = False
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter:
    """A named trainable tensor plus Adam moment buffers."""

    def __init__(self, name: str, values):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True, name=name)
        self.m = np.zeros_like(self.tensor.values)
        self.v = np.zeros_like(self.tensor.values)

    @property
    def values(self):
        return self.tensor.values

    @values.setter
    def values(self, new):
        self.tensor.values = np.asarray(new, dtype=np.float64)

    @property
    def shape(self):
        return self.tensor.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _live(t: Tensor) -> bool:
    return t.requires_grad and not t.stop_grad


def _make(values, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(values)
    live = tuple(p for p in parents if _live(p))
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.full(shape, g.sum()) if len(shape) else np.asarray(g.sum())


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "subtract")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "multiply")

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "divide")
    if np.any(b.values == 0):
        raise DomainError(f"divide: zero denominator in tensor of shape {b.shape}")
    out = a.values / b.values

    def bw(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * out / b.values, b.shape))

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        return g @ b.values.T, a.values.T @ g

    return _make(a.values @ b.values, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with the bias row added to every row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: shapes {x.shape} and {w.shape} do not conform")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match {w.shape}")

    def bw(g):
        return g @ w.values.T, x.values.T @ g, g.sum(axis=0)

    return _make(x.values @ w.values + b.values, (x, w, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        bad = float(a.values[a.values <= 0].reshape(-1)[0])
        raise DomainError(f"log: nonpositive operand {bad!r} in tensor of shape {a.shape}")
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / count)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.values), (a,), lambda g: (g * np.sign(a.values),))


def concat(tensors: Sequence, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].values.ndim
    ax = axis % ndim
    for t in ts[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(ts[0].shape) if i != ax]
        if other != first:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform")
    out = np.concatenate([t.values for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, bw)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.values[idx]

    def bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


def where(mask, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(np.broadcast_to(np.where(mask, a.values, b.values), shape).copy(), (a, b), bw)


def xlogx(a) -> Tensor:
    """``x*log(x)`` with ``0*log(0) = 0``; the derivative is clamped at ``CLAMP``."""
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise DomainError("xlogx: negative operand")
    safe = np.maximum(a.values, CLAMP)
    out = np.where(a.values > 0, a.values * np.log(safe), 0.0)
    return _make(out, (a,), lambda g: (g * (np.log(safe) + 1.0),))


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values)
    out.stop_grad = True
    return out


def custom(values, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an externally computed value with a hand-written backward."""
    return _make(values, tuple(as_tensor(p) for p in parents), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------------ backward

def _topo(output: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if _live(p) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, params: Optional[Iterable[Parameter]] = None) -> Dict[str, np.ndarray]:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from parameter name to gradient for ``params``; parameters
    that cannot be reached (or are only reachable through a stop-gradient
    node) get exact zeros.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    params = list(params or [])
    for p in params:
        p.tensor.grad = None
    if _live(output):
        grads = {id(output): np.ones_like(output.values)}
        for node in reversed(_topo(output)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not _live(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return {p.name: (p.tensor.grad.copy() if p.tensor.grad is not None
                     else np.zeros_like(p.values)) for p in params}


# ------------------------------------------------------------ gradient check

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                            step: float = 1e-5, max_coords: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` rebuilds the scalar from the current parameter values.  With
    ``max_coords`` set, a random subset of coordinates per parameter is probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = backward(f(), params)
    worst = 0.0
    for p in params:
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        ga = analytic[p.name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = f().item()
            flat[c] = orig - step
            fm = f().item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite evaluation at {p.name}[{c}]")
            numeric = (fp - fm) / (2 * step)
            err = abs(ga[c] - numeric) / max(1.0, abs(ga[c]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(params: Iterable[Parameter], path) -> None:
    blob = {}
    for p in params:
        if p.name in blob:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        raw = np.ascontiguousarray(p.values, dtype="<f8").tobytes()
        blob[p.name] = {"shape": list(p.shape), "data": base64.b64encode(raw).decode("ascii")}
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path) as fh:
        blob = json.load(fh)
    out = {}
    for name, rec in blob.items():
        arr = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8")
        out[name] = arr.reshape(rec["shape"]).astype(np.float64)
    return out
