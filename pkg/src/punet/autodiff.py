"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the upstream gradient to
gradients for its inputs.  ``backward`` walks the recorded graph in reverse
topological order.  Graphs are confined to the thread that built them.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_local = threading.local()
_DEBUG = False


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""


def set_debug(flag: bool) -> None:
    """Assert finiteness of every primitive's output when ``flag`` is set."""
    global _DEBUG
    _DEBUG = bool(flag)


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _not_scalar(t):
    raise ValueError(f"item: tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def make_op(data: np.ndarray, parents: tuple, backward_fn, op: str, finite: bool = True) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    Other modules use this to register fused primitives; ``finite=False``
    exempts outputs that may legitimately be infinite from the debug check.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    if _DEBUG and finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite output")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_op(out, (a, b), bw, "div")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const(b, a)
    if isinstance(b, Tensor):
        return _const(a, b), b
    return as_tensor(a), as_tensor(b)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return make_op(out, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """Swish: x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = x.data * s
    return make_op(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half * sigmoid(second half) along ``axis``."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} has odd extent {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)
    out = a * s

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return make_op(out, (x,), bw, "glu")


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``mask`` is true, else ``fill``; mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, x.data, np.asarray(fill, dtype=x.dtype))
    except ValueError:
        raise ShapeError(f"where: cannot broadcast mask {mask.shape} with {x.shape}") from None
    return make_op(out, (x,), lambda g: (_unbroadcast(g * mask, x.shape),), "where")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep.astype(x.dtype))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    src = x.shape
    return make_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_op(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("getitem: index with numpy arrays, not tensors")
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(np.array(out, copy=basic), (x,), bw, "getitem")


def take(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` (embedding)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"take: ids outside [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return make_op(weight.data[ids], (weight,), bw, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def pad_axis(x: Tensor, before: int, after: int, axis: int) -> Tensor:
    width = [(0, 0)] * x.ndim
    width[axis] = (before, after)
    n = x.shape[axis]

    def bw(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return make_op(np.pad(x.data, width), (x,), bw, "pad")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ in {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = (x.data.reshape(-1, x.shape[-1]) @ w.data.T).reshape(x.shape[:-1] + (w.shape[0],))  # one GEMM
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ w.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, x.shape[-1])) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, parents, bw, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gamma {gamma.shape} beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                   "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return make_op(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
                   "log_softmax")


# ---------------------------------------------------------------------------
# convolutions over (batch, time, channel) inputs


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded per-channel convolution; ``x`` is (B, T, D), ``w`` is (D, k)."""
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} with kernel {w.shape}")
    k = w.shape[1]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel width {k} must be odd")
    T = x.shape[1]
    half = k // 2
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + T, :] * w.data[:, j]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[:, j:j + T, :] += g * w.data[:, j]
            gx = gp[:, half:half + T, :]
        if w.requires_grad:
            gw = np.stack([(xp[:, j:j + T, :] * g).sum(axis=(0, 1)) for j in range(k)], axis=1)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return make_op(out, parents, bw, "depthwise_conv1d")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided convolution; ``x`` is (B, T, Cin), ``w`` is (Cout, Cin, k)."""
    if x.ndim != 3 or w.ndim != 3 or w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d: input {x.shape} with kernel {w.shape}")
    B, T, cin = x.shape
    cout, _, k = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    tout = (T + 2 * padding - k) // stride + 1
    if tout < 1:
        raise ShapeError(f"conv1d: input length {T} too short for kernel {k}")
    span = stride * (tout - 1) + 1
    cols = np.concatenate([xp[:, j:j + span:stride, :] for j in range(k)], axis=-1)
    wmat = np.transpose(w.data, (0, 2, 1)).reshape(cout, k * cin)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gcols = g @ wmat
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[:, j:j + span:stride, :] += gcols[..., j * cin:(j + 1) * cin]
            gx = gp[:, padding:padding + T, :]
        if w.requires_grad:
            gm = g.reshape(-1, cout).T @ cols.reshape(-1, k * cin)
            gw = np.transpose(gm.reshape(cout, k, cin), (0, 2, 1))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return make_op(out, parents, bw, "conv1d")


def rel_shift(x: Tensor) -> Tensor:
    """Skew (..., T, 2T-1) relative scores into (..., T, T).

    Column r of the input holds relative distance ``T-1-r``; output
    ``[i, j]`` picks distance ``i - j``.
    """
    T = x.shape[-2]
    if x.shape[-1] != 2 * T - 1:
        raise ShapeError(f"rel_shift: expected last extent {2 * T - 1}, got {x.shape}")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    idx = np.broadcast_to(j - i + T - 1, x.shape[:-1] + (T,))
    out = np.take_along_axis(x.data, idx, axis=-1)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=-1)
        return (full,)

    return make_op(out, (x,), bw, "rel_shift")


def logsumexp_np(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


# ---------------------------------------------------------------------------
# graph traversal


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``params`` (a ParamStore) is given, its tensors that the graph does
    not reach receive a zero gradient.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.requires_grad:
        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(_topo(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
