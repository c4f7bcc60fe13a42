"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a fresh buffer (no views are ever shared between tensors) and,
when gradients are being recorded, a closure that maps the output gradient to
the gradients of its inputs.  ``backward`` walks the recorded graph in reverse
topological order and accumulates into multi-consumer nodes.

Numerics run in float32 by default; ``precision("float64")`` switches the
default dtype, which is what the finite-difference checks use.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count(1)
_state = threading.local()


def _default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype: str | np.dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = _default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype(), copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = next(_ids)
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    t = Tensor._wrap(out)
    t.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    return shape


# ---------------------------------------------------------------- factories

def zeros(shape, requires_grad=False) -> Tensor:
    return full(shape, 0.0, requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return full(shape, 1.0, requires_grad)


def full(shape, value: float, requires_grad=False) -> Tensor:
    t = Tensor._wrap(np.full(_check_shape(shape), value, dtype=_default_dtype()))
    t.requires_grad = requires_grad
    return t


def rng(seed) -> np.random.Generator:
    """The project-wide generator: Philox-4x64 (counter based), ziggurat normals."""
    return np.random.Generator(np.random.Philox(seed))


def randn(shape, seed, requires_grad=False) -> Tensor:
    arr = rng(seed).standard_normal(_check_shape(shape), dtype=np.float64)
    t = Tensor._wrap(arr.astype(_default_dtype()))
    t.requires_grad = requires_grad
    return t


# ---------------------------------------------------------- elementwise ops

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape)))) if g.ndim > len(shape) else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="raise"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = as_tensor(a)
    ad = a.data
    out = ad ** p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# --------------------------------------------------------------- reductions

def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def reduce_max(x, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along one axis; ties resolve to the lowest index.

    Returns the values and the integer argmax; the backward pass routes each
    slice's gradient to its argmax only.
    """
    x = as_tensor(x)
    (ax,) = _axes(axis, x.ndim)
    idx = np.argmax(x.data, axis=ax)
    vals = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(dx, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (dx,)

    return _make(vals, (x,), backward, "max"), idx


# -------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    (ax,) = _axes(axis, xs[0].ndim)
    try:
        out = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=ax))

    return _make(out, xs, backward, "concat")


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs M×K · K×N, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of N×Cin×H×W input with Cout×Cin×k×k weights.

    The zero-padded input is stored channels-last and flattened over
    (n, row, col), so every kernel tap is one contiguous row block and the
    convolution is k·k plain GEMMs; rows that fall on padding are discarded.
    Strided outputs are the stride-1 result subsampled.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ShapeError(f"weight {w.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if pad < 0 or stride < 1:
        raise ShapeError("need pad >= 0 and stride >= 1")
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"non-integer conv output size for H={h}, W={wd}, k={k}, stride={stride}, pad={pad}")
    ho, wo = span_h + 1, span_w + 1          # stride-1 extent
    hp, wp = h + 2 * pad, wd + 2 * pad
    rows = n * hp * wp
    dt = x.dtype

    xflat = np.zeros((rows + (k - 1) * (wp + 1), cin), dtype=dt)
    xflat[:rows].reshape(n, hp, wp, cin)[:, pad:pad + h, pad:pad + wd, :] = x.data.transpose(0, 2, 3, 1)
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    taps = [np.ascontiguousarray(w.data[:, :, i, j].T) for i in range(k) for j in range(k)]

    acc = xflat[:rows] @ taps[0]
    for off, tap in zip(offsets[1:], taps[1:]):
        acc += xflat[off:off + rows] @ tap
    if b is not None:
        b = as_tensor(b)
        acc += b.data
    grid = acc.reshape(n, hp, wp, cout)[:, :ho:stride, :wo:stride, :]
    out = np.ascontiguousarray(grid.transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)
    need_x = x.requires_grad

    def backward(g):
        gflat = np.zeros((rows, cout), dtype=g.dtype)
        gflat.reshape(n, hp, wp, cout)[:, :ho:stride, :wo:stride, :] = g.transpose(0, 2, 3, 1)
        dw = np.empty(w.shape, dtype=g.dtype)
        for t, off in enumerate(offsets):
            dw[:, :, t // k, t % k] = gflat.T @ xflat[off:off + rows]
        dx = None
        if need_x:
            dflat = np.zeros_like(xflat)
            for off, tap in zip(offsets, taps):
                dflat[off:off + rows] += gflat @ tap.T
            dx = np.ascontiguousarray(
                dflat[:rows].reshape(n, hp, wp, cin)[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2))
        grads = [dx, dw]
        if b is not None:
            grads.append(gflat.sum(axis=0))
        return grads

    return _make(out, parents, backward, "conv2d")


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping size×size max pooling; ties go to the first window element."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial dims {h}×{w} not divisible by pool size {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _make(out, (x,), backward, "max_pool")


def _bilinear_matrix(size: int, scale: int, dtype) -> np.ndarray:
    """Half-pixel (align_corners=False) interpolation matrix, out = U @ in.

    Source coordinate of output index o is (o + 0.5) / scale - 0.5, clamped to
    [0, size - 1] at the borders.
    """
    out_size = size * scale
    src = np.clip((np.arange(out_size) + 0.5) / scale - 0.5, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    u = np.zeros((out_size, size))
    np.add.at(u, (np.arange(out_size), lo), 1 - frac)
    np.add.at(u, (np.arange(out_size), hi), frac)
    return u.astype(dtype)


def upsample_bilinear(x, scale: int) -> Tensor:
    """Bilinear upsampling of the two trailing axes by an integer factor."""
    x = as_tensor(x)
    if int(scale) != scale or scale < 1:
        raise ShapeError(f"scale must be an integer >= 1, got {scale}")
    scale = int(scale)
    if scale == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    uh = _bilinear_matrix(x.shape[-2], scale, x.dtype)
    uw = _bilinear_matrix(x.shape[-1], scale, x.dtype)
    out = uh @ x.data @ uw.T
    return _make(out, (x,), lambda g: (uh.T @ g @ uw,), "upsample")


# ----------------------------------------------------------------- backward

@dataclass
class Tape:
    """Reverse-sweep record: nodes in topological order and their gradients."""

    nodes: list[Tensor] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(t.node_id)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Tape:
    """Back-propagate from a 0-dim tensor; leaves get ``.grad`` set."""
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    tape = Tape(nodes=_topological(loss))
    grads = tape.grads
    grads[loss.node_id] = np.ones((), dtype=loss.dtype)
    for node in reversed(tape.nodes):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
        # interior nodes never need their gradient again
        if node._parents:
            del grads[node.node_id]
    for node in tape.nodes:
        if not node._parents and node.node_id in grads:
            node.grad = np.asarray(grads[node.node_id], dtype=node.dtype).reshape(node.shape)
    return tape


def parameters_grad(params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients for ``params``, zeros where a parameter was unreachable."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
