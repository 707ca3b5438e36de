"""Dense tensors with reverse-mode differentiation.

Every op records a closure mapping the output cotangent to input cotangents.
Backward is a single reverse topological sweep; leaves must be reset
(``zero_grad``) between sweeps.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class GraphError(RuntimeError):
    """Raised for misuse of the compute graph (cycles, stale gradients, shape errors)."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating type (``"float32"`` or ``"float64"``)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    # -- differentiation ----------------------------------------------
    def backward(self, seed=None) -> None:
        backward(self, seed)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _coerce(a, b):
    """Bring a binary op's operands to tensors with a common float type."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return Tensor(a), Tensor(b)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), -unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p == 2:
        return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    return power(a, 2)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype)
    sig = 0.5 * (np.tanh(0.5 * ad) + 1.0)
    return _result(out, (a,), lambda g: (g * sig,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out.astype(x.dtype), (a,), bw)


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,))


def clip(a, lo, hi) -> Tensor:
    """Clamp; gradient passes where ``lo <= a <= hi``."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return _result(np.maximum(ad, bd), (a, b),
                   lambda g: (unbroadcast(g * pick_a, ad.shape), unbroadcast(g * ~pick_a, bd.shape)))


def where(cond, a, b) -> Tensor:
    """Select with a constant boolean condition."""
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    zero = np.zeros((), dtype=a.dtype)
    return _result(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (unbroadcast(np.where(cond, g, zero), sa),
                              unbroadcast(np.where(cond, zero, g), sb)))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / n)


def max_(a, axis=-1, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the lowest index among ties."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        z = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(z, idx, g, axis=axis)
        return (z,)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), bw)


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.cumsum(a.data, axis=axis), (a,), bw)


def norm(a, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    unit = np.where(out > 0, a.data / safe, 0.0)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * unit,)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, old),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(old),))


def _is_basic_index(idx) -> bool:
    if not isinstance(idx, tuple):
        idx = (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) or i is Ellipsis for i in idx)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(a.data[idx], (a,), bw)


def take_along_axis(a, indices, axis) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices)
    shape = a.shape

    def bw(g):
        z = np.zeros(shape, dtype=g.dtype)
        idx_b = np.broadcast_to(indices, g.shape)
        # put_along_axis does not accumulate; duplicates need add.at
        grids = list(np.indices(g.shape, sparse=True))
        grids[axis % len(shape)] = idx_b
        np.add.at(z, tuple(grids), g)
        return (z,)

    return _result(np.take_along_axis(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _result(out, tensors, bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise GraphError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise GraphError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


def solve(A, b) -> Tensor:
    """Batched ``A x = b`` with ``b`` of shape (..., n, k)."""
    A, b = _coerce(A, b)
    Ad = A.data
    x = np.linalg.solve(Ad, b.data)

    def bw(g):
        gb = np.linalg.solve(np.swapaxes(Ad, -1, -2), g)
        gA = -gb @ np.swapaxes(x, -1, -2)
        return unbroadcast(gA, Ad.shape), unbroadcast(gb, b.shape)

    return _result(x, (A, b), bw)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack_: list[tuple[Tensor, int]] = [(root, 0)]
    while stack_:
        node, i = stack_.pop()
        key = id(node)
        if i == 0:
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise GraphError("cycle detected in compute graph")
            state[key] = 1
        parents = node._parents
        if i < len(parents):
            stack_.append((node, i + 1))
            p = parents[i]
            if p.requires_grad:
                st = state.get(id(p))
                if st == 1:
                    raise GraphError("cycle detected in compute graph")
                if st is None:
                    stack_.append((p, 0))
        else:
            state[key] = 2
            order.append(node)
    order.reverse()
    return order


def _sweep(root: Tensor, seed) -> dict[int, np.ndarray]:
    if not root.requires_grad:
        raise GraphError("output does not depend on any tensor requiring grad")
    if seed is None:
        if root.size != 1:
            raise GraphError(f"seed required for non-scalar output of shape {root.shape}")
        seed = np.ones(root.shape, dtype=root.dtype)
    seed = np.asarray(seed, dtype=root.dtype)
    if seed.shape != root.shape:
        raise GraphError(f"seed shape {seed.shape} does not match output shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in _toposort(root):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    return grads


def backward(output: Tensor, seed=None) -> None:
    """Populate ``.grad`` on every reachable leaf.

    Leaves that already hold a gradient are rejected: call ``zero_grad`` first.
    """
    leaves = [n for n in _toposort(output) if n.is_leaf and n.requires_grad]
    stale = [n for n in leaves if n.grad is not None]
    if stale:
        names = ", ".join(n.name or repr(n) for n in stale[:3])
        raise GraphError(f"gradient already populated on {names}; reset before a second backward")
    grads = _sweep(output, seed)
    for leaf in leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros(leaf.shape, leaf.dtype) if g is None else np.array(g, dtype=leaf.dtype)


def grad(output: Tensor, inputs: Iterable[Tensor], seed=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. arbitrary graph nodes, leaving ``.grad`` untouched.

    Inputs the output does not depend on get zero gradients.
    """
    grads = _sweep(output, seed)
    return [np.array(np.broadcast_to(grads[id(t)], t.shape), dtype=t.dtype) if id(t) in grads
            else np.zeros(t.shape, t.dtype) for t in inputs]


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
