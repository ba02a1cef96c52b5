"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Every op that receives at least one tensor with
``requires_grad`` records a node holding its parents and a backward closure;
nodes carry a monotonically increasing id so that :func:`backward` can replay
them in reverse construction order.

Image tensors use the channels-last layout ``(N, H, W, C)``.

Gradients accumulate: calling ``backward`` twice without ``zero_grad`` sums
the two contributions, as in most autodiff frameworks.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-7

_state = threading.local()
_node_ids = itertools.count()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside the block (gradient checks only)."""
    prev = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype or default_dtype()
        self.data = np.require(np.asarray(data, dtype=dtype), requirements="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    return a, b


# --- element-wise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def minimum(a, b) -> Tensor:
    """Element-wise minimum; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data

    def bw(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _make(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        _accum(x, g * pos)

    return _make(x.data * pos, (x,), bw, "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), bw, "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _make(out, (x,), bw, "exp")


def log(x, eps=EPS) -> Tensor:
    """Natural log of ``max(x, eps)``; clamped entries get zero gradient."""
    x = as_tensor(x)
    inside = x.data > eps
    safe = np.where(inside, x.data, eps)

    def bw(g):
        _accum(x, g * inside / safe)

    return _make(np.log(safe), (x,), bw, "log")


def clip(x, lo, hi) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accum(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), bw, "clip")


# --- reductions ----------------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# --- linear algebra / layers ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _im2col(xp, kh, kw):
    n, hp, wp, c = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if kh == 1 and kw == 1:
        return xp.reshape(n * ho * wo, c)
    # windows: (N, ho, wo, C, kh, kw) -> rows ordered (kh, kw, C) to match weights
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def _pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv2d(x, w, b=None, padding=1) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation).

    x: (N, H, W, C_in); w: (kh, kw, C_in, C_out); b: (C_out,).
    """
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    p = padding
    xp = _pad(x.data, p)
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[1:3]}")
    cols = _im2col(xp, kh, kw)
    out = cols @ w.data.reshape(kh * kw * cin, cout)
    if b is not None:
        b = as_tensor(b, dtype=x.data.dtype)
        out += b.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            # input gradient = full correlation of g with the 180-degree rotated kernel
            wf = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
            dxp = (_im2col(gp, kh, kw) @ wf).reshape(xp.shape)
            _accum(x, dxp[:, p:p + h, p:p + wd, :] if p else dxp)

    return _make(out, parents, bw, "conv2d")


def maxpool2(x) -> Tensor:
    """2x2 max-pool with stride 2 on (N, H, W, C); H and W must be even."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial size {h}x{w} is not even")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        _accum(x, gx)

    return _make(out, (x,), bw, "maxpool2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling on (N, H, W, C)."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        _accum(x, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _make(out, (x,), bw, "upsample2")


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


# --- probabilistic ---------------------------------------------------------------

def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def gather(x, index, axis=-1) -> Tensor:
    """Pick one entry along ``axis`` per position; ``index`` drops that axis."""
    x = as_tensor(x)
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    if idx.ndim != x.ndim:
        raise ValueError(f"gather: index shape {np.shape(index)} does not match {x.shape}")
    out = np.take_along_axis(x.data, idx, axis=axis)
    out = np.squeeze(out, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)

    return _make(out, (x,), bw, "gather")


def bce(p, target, eps=EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against ``target``.

    ``p`` is clamped to ``[eps, 1 - eps]``; clamped entries pass no gradient.
    """
    p = as_tensor(p)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.data.dtype)
    if t.shape != p.shape:
        raise ValueError(f"bce: prediction {p.shape} and target {t.shape} differ")
    q = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    n = p.data.size
    loss = -(t * np.log(q) + (1.0 - t) * np.log1p(-q)).mean()

    def bw(g):
        _accum(p, g * inside * (q - t) / (q * (1.0 - q)) / n)

    return _make(np.asarray(loss, dtype=p.data.dtype), (p,), bw, "bce")


def cross_entropy(logits, target, axis=-1) -> Tensor:
    """Mean categorical cross-entropy of class ``logits`` against integer ``target``."""
    logits = as_tensor(logits)
    tgt = np.asarray(target)
    expected = tuple(d for i, d in enumerate(logits.shape) if i != axis % logits.ndim)
    if tgt.shape != expected:
        raise ValueError(f"cross_entropy: target shape {tgt.shape}, expected {expected}")
    return mul(mean(gather(log_softmax(logits, axis=axis), tgt, axis=axis)), -1.0)


# --- backward pass --------------------------------------------------------------

def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
    for t in order:
        if t._backward is not None:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in order:
        if t._backward is None or t.grad is None:
            continue
        t._backward(t.grad)
        # intermediates hold upstream gradient only while in flight
        t.grad = None


# --- optimisation -----------------------------------------------------------------

class Adam:
    """Adam optimizer updating parameter tensors in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t = adam_step(self.params, [p.grad for p in self.params], self.m, self.v,
                           self.lr, self.betas, self.eps, self.t)


def adam_step(params, grads, m, v, lr, betas=(0.9, 0.999), eps=1e-8, t=0):
    """One in-place Adam update; returns the incremented step counter."""
    if lr <= 0:
        raise ValueError(f"adam_step: learning rate must be positive, got {lr}")
    b1, b2 = betas
    t += 1
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            continue
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        mhat = mi / (1 - b1 ** t)
        vhat = vi / (1 - b2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
    return t
