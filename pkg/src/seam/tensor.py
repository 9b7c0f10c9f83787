"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` produced by an op that has a differentiable input carries a
:class:`Node` recording its parents and a backward closure. ``backward`` walks
the recorded graph once in reverse topological order; a consumed graph cannot
be walked again.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Inputs have incompatible shapes for an op."""


class NonFiniteError(FloatingPointError):
    """Non-finite input encountered while test mode is active."""


class TapeError(RuntimeError):
    """Backward called on an invalid or already consumed graph."""


class _Config:
    dtype = np.float32
    test_mode = False
    grad_enabled = True


config = _Config()


def default_dtype():
    return config.dtype


@contextlib.contextmanager
def test_mode(enabled=True):
    """float64 arithmetic with non-finite input checks (gradient-check mode)."""
    prev = (config.dtype, config.test_mode)
    config.dtype = np.float64 if enabled else np.float32
    config.test_mode = enabled
    try:
        yield
    finally:
        config.dtype, config.test_mode = prev


@contextlib.contextmanager
def no_grad():
    prev = config.grad_enabled
    config.grad_enabled = False
    try:
        yield
    finally:
        config.grad_enabled = prev


_node_ids = itertools.count()


class Node:
    __slots__ = ("id", "parents", "backward_fn", "consumed", "op")

    def __init__(self, op, parents, backward_fn):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or config.dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node: Optional[Node] = None

    # -- introspection -----------------------------------------------------
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
    def node_id(self):
        return None if self.node is None else self.node.id

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(op, arrays):
    if config.test_mode:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite input")


def make(op: str, data, parents: Sequence[Tensor], backward_fn: Callable):
    """Wrap ``data`` as an op output, recording a node when needed.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if config.grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _tracked(t):
    return t.requires_grad or t.node is not None


def backward(loss: Tensor):
    """Populate ``.grad`` of every leaf tensor reachable from scalar ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + 1.0
            return
        raise TapeError("loss was not produced by recorded ops")
    if loss.node.consumed:
        raise TapeError("backward on a tape already consumed")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen and _tracked(p):
                    stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if t.node is None:
            if t.requires_grad and g is not None:
                t.grad = t.grad + g
            continue
        node = t.node
        if node.consumed:
            raise TapeError("backward on a tape already consumed")
        if g is not None:
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not _tracked(p):
                    continue
                pg = _unbroadcast(np.asarray(pg), p.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        node.consumed = True
        node.backward_fn = None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    _check_finite("add", (a.data, b.data))
    return make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    _check_finite("sub", (a.data, b.data))
    return make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    _check_finite("mul", (a.data, b.data))
    ad, bd = a.data, b.data
    return make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    _check_finite("div", (a.data, b.data))
    ad, bd = a.data, b.data
    return make("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def square(a):
    a = as_tensor(a)
    _check_finite("square", (a.data,))
    ad = a.data
    return make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a):
    a = as_tensor(a)
    _check_finite("exp", (a.data,))
    out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    _check_finite("log", (a.data,))
    ad = a.data
    return make("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a):
    a = as_tensor(a)
    _check_finite("relu", (a.data,))
    mask = a.data > 0
    return make("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return make("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make("stack", np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def index(a, i):
    """``a[i]`` for an integer or slice index."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return make("index", np.asarray(a.data[i]), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("matmul", (a.data, b.data))
    ad, bd = a.data, b.data
    return make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None):
    """``x @ w.T (+ b)`` with ``w`` of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    _check_finite("linear", (x.data, w.data))
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:
        return make("linear", out, (x, w), lambda g: (g @ wd, g.T @ xd))
    b = as_tensor(b)
    return make("linear", out + b.data, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1, pad=0, groups=1):
    """NCHW convolution with OIHW weight. ``groups`` is 1 or the channel count."""
    from . import _kernels as K

    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIHW weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci * groups != c or (groups != 1 and (groups != c or o != c)):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} (groups={groups})")
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    _check_finite("conv2d", (x.data, w.data))
    xd, wdat = x.data, w.data

    if groups != 1:
        out = K.dwconv_forward(xd, wdat, stride, pad)

        def bw_dw(g):
            dx, dw = K.dwconv_backward(xd, wdat, g.astype(xd.dtype, copy=False), stride, pad)
            return dx, dw

        return make("dwconv2d", out, (x, w), bw_dw)

    cols = K.im2col(xd, kh, kw, stride, pad)
    wm = np.ascontiguousarray(wdat.transpose(0, 2, 3, 1)).reshape(o, -1)  # columns (i, j, c)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (g2.T @ cols).reshape(o, kh, kw, ci).transpose(0, 3, 1, 2)
        dx = K.col2im(g2 @ wm, x.shape, kh, kw, stride, pad)
        return dx, dw

    return make("conv2d", out, (x, w), bw)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    return make(
        "avgpool",
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape),),
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over axis 1 for (N, C) or (N, C, H, W) inputs.

    In training mode the running buffers (plain numpy arrays) are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_finite("batch_norm", (x.data,))
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
        m = None
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gd
        if training:
            dx = (gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            dx = dx * inv_std.reshape(bshape)
        else:
            dx = gx * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite("softmax", (a.data,))
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return make("softmax", p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite("log_softmax", (a.data,))
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def one_hot(labels, k, dtype=None):
    labels = np.asarray(labels)
    out = np.zeros((labels.size, k), dtype=dtype or config.dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    ls = log_softmax(logits, axis=1)
    return mul(sum_(mul(ls, one_hot(labels, k, logits.data.dtype))), -1.0 / n)


def weighted_sum(weights, tensors):
    """``sum_j weights[j] * tensors[j]`` for a 1-D weight tensor."""
    weights = as_tensor(weights)
    tensors = [as_tensor(t) for t in tensors]
    if weights.shape != (len(tensors),):
        raise ShapeError(f"weighted_sum: {weights.shape} weights for {len(tensors)} tensors")
    wd = weights.data
    datas = [t.data for t in tensors]
    out = datas[0] * wd[0]
    for j in range(1, len(datas)):
        out = out + datas[j] * wd[j]

    def bw(g):
        gw = np.array([np.sum(g * d) for d in datas], dtype=wd.dtype)
        return (gw, *[g * wd[j] for j in range(len(datas))])

    return make("weighted_sum", out.astype(datas[0].dtype, copy=False), (weights, *tensors), bw)
