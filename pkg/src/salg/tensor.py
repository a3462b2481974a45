"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Every op records a closure mapping the upstream gradient to one gradient per
parent. ``Tensor.backward`` walks the tape in reverse topological order and
accumulates into the ``grad`` buffers of leaf tensors (parameters and any
input created with ``requires_grad=True``). Gradients accumulate across
backward calls until ``zero_grad`` is called.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True

# Test hook: when set, layer_norm's backward is deliberately wrong.
CORRUPT_BACKWARD = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

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
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

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


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward)


def power(a, exponent):
    ad = a.data
    exponent = float(exponent)
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sin(a):
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_K * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3.0 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (numpy rules)."""
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, key):
    """Basic (slice/int) indexing only."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _make(np.array(a.data[key]), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def index_select(a, axis, idx):
    """Select entries of ``a`` along ``axis`` by an integer array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    axis = axis % a.ndim

    def backward(g):
        out = np.zeros(shape)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, idx, gm)
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward)


def take_rows(a, idx):
    """Rows of a 2-D table by an integer array of any shape; repeats allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx.ravel(), g.reshape(-1, shape[1]))
        return (out,)

    return _make(a.data[idx], (a,), backward)


def gather_rows(a, idx):
    """Rows of ``a`` (N, C) picked by ``idx``; entries equal to -1 yield zero rows.

    Non-negative entries of ``idx`` must be distinct.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n, c = a.shape
    padded = np.concatenate([a.data, np.zeros((1, c))])
    out = padded[np.where(idx < 0, n, idx)]
    flat = idx.ravel()
    keep = flat >= 0

    def backward(g):
        ga = np.zeros((n, c))
        ga[flat[keep]] = g.reshape(-1, c)[keep]
        return (ga,)

    return _make(out, (a,), backward)


def scatter_rows(a, idx, n):
    """Inverse of ``gather_rows``: write rows of ``a`` (..., C) to ``idx`` in an (n, C) table.

    Entries equal to -1 are dropped; rows never written stay zero. Non-negative
    entries must be distinct.
    """
    idx = np.asarray(idx, dtype=np.int64).ravel()
    c = a.shape[-1]
    src = a.data.reshape(-1, c)
    keep = idx >= 0
    out = np.zeros((n, c))
    out[idx[keep]] = src[keep]
    shape = a.shape

    def backward(g):
        ga = np.zeros_like(src)
        ga[keep] = g[idx[keep]]
        return (ga.reshape(shape),)

    return _make(out, (a,), backward)


def pad2d(a, top, bottom, left, right, mode="zeros"):
    """Pad axes 1 and 2 of a (B, H, W, C) tensor with zeros or edge replicas."""
    if mode == "zeros":
        b, h, w, c = a.shape
        out = np.zeros((b, h + top + bottom, w + left + right, c))
        out[:, top:top + h, left:left + w] = a.data
        return _make(out, (a,), lambda g: (g[:, top:top + h, left:left + w].copy(),))
    if mode == "edge":
        h, w = a.shape[1], a.shape[2]
        rows = np.clip(np.arange(-top, h + bottom), 0, h - 1)
        cols = np.clip(np.arange(-left, w + right), 0, w - 1)
        return index_select(index_select(a, 1, rows), 2, cols)
    raise ValueError(f"unknown padding mode {mode!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


def mlp(x, w1, b1, w2, b2, ratio=4):
    c = x.shape[-1]
    if w1.shape != (c, ratio * c) or w2.shape != (ratio * c, c):
        raise ValueError(
            f"mlp expects hidden width {ratio}*{c}; got {w1.shape} and {w2.shape}")
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------- normalisation


def softmax(a, axis=-1):
    """Max-stabilised softmax; -inf maps to exactly 0 and all -inf lines to all zeros."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: last dim {c} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            if CORRUPT_BACKWARD:
                gx = gx * 1.01
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution


def conv2d(x, weight, bias=None, stride=1, padding=0, padding_mode="zeros"):
    """Cross-correlation of a (B, H, W, Cin) map with a (Cout, Cin, kh, kw) kernel."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a (B, H, W, C) map, got {x.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[3] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if padding:
        x = pad2d(x, padding, padding, padding, padding, mode=padding_mode)
    b, hp, wp, _ = x.shape
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = x.data
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win[:, : stride * (ho - 1) + 1 : stride,
                                    : stride * (wo - 1) + 1 : stride])
    cols = cols.reshape(b * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, ho, wo, cin, kh, kw)
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + stride * (ho - 1) + 1 : stride,
                       j : j + stride * (wo - 1) + 1 : stride] += gcols[..., i, j]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


# ---------------------------------------------------------------- losses


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, n) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    bsz = z.shape[0]
    loss = -logp[np.arange(bsz), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(bsz), labels] -= 1.0
        return (g * p / bsz,)

    return _make(np.asarray(loss), (logits,), backward)
