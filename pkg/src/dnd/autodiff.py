"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor` holding a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order; gradients of a pass are added into ``.grad`` once
at the end, so two passes without zeroing double every gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs an explicit grad for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    ex = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


# -- reductions and shape -------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch dims on either side."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch dims into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (bool, broadcastable) marks allowed entries."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy. ``weights`` optionally masks/weights positions."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.size and (targets.max() >= V or targets.min() < 0):
        raise IndexError(f"target id out of range for vocab size {V}")
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise ShapeError(f"cross_entropy: {logits.shape} logits vs {targets.shape} targets")
    w = np.ones(t.shape[0]) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    total = w.sum()
    m = flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(flat - m).sum(axis=1)) + m[:, 0]
    rows = np.arange(t.shape[0])
    nll = lse - flat[rows, t]
    out = np.asarray((w * nll).sum() / total)

    def backward(g):
        p = np.exp(flat - lse[:, None])
        p[rows, t] -= 1.0
        p *= (w / total)[:, None] * g
        return (p.reshape(logits.shape),)

    return _make(out, (logits,), backward)


def layer_norm_rms(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv
    out = xhat * weight.data
    d = xd.shape[-1]

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make(out, (x, weight), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.max() >= V or ids.min() < 0):
        raise IndexError(f"token id out of range for vocab size {V}")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward)


def move_rows(x: Tensor, src: np.ndarray, dst: np.ndarray, out_shape: tuple[int, ...]) -> Tensor:
    """Copy rows ``x.flat_rows[src]`` into ``out.flat_rows[dst]`` of a zero tensor.

    Rows are the last axis. Indices are constants; gradient flows only through
    the copied values. ``src`` and ``dst`` must each be free of duplicates.
    """
    d = x.shape[-1]
    if out_shape[-1] != d:
        raise ShapeError(f"move_rows: row width {d} vs output {out_shape}")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.shape != dst.shape:
        raise ShapeError(f"move_rows: index maps differ in length ({src.shape} vs {dst.shape})")
    out = np.zeros((int(np.prod(out_shape[:-1])), d), dtype=DTYPE)
    out[dst] = x.data.reshape(-1, d)[src]

    def backward(g):
        gx = np.zeros((x.data.size // d, d), dtype=DTYPE)
        gx[src] = g.reshape(-1, d)[dst]
        return (gx.reshape(x.shape),)

    return _make(out.reshape(out_shape), (x,), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary encoding on the last axis (split-half pairing).

    ``cos``/``sin`` have shape broadcastable to ``x`` with last dim ``d/2``.
    """
    h = x.shape[-1] // 2
    xd = x.data
    x1, x2 = xd[..., :h], xd[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(out, (x,), backward)


# -- verification ---------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of scalar ``f``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=DTYPE)
    t = Tensor(x.copy(), requires_grad=True)
    y = f(t)
    if y.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    y.backward()
    auto = np.zeros_like(x) if t.grad is None else t.grad
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f(Tensor(x.copy())).data)
        flat[i] = old - eps
        lo = float(f(Tensor(x.copy())).data)
        flat[i] = old
        numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
    err = np.abs(auto - numeric) / np.maximum(np.abs(numeric), 1e-8)
    return float(err.max())
