"""Reverse-mode autodiff over dense float64 numpy arrays.

The graph is built eagerly: every op returns a `Node` holding its value and
closures that push gradients to its parents. `backward` walks the graph once
in reverse topological order. Values are float64 throughout; any op that
produces a NaN/Inf raises immediately (see `CHECK_FINITE`) instead of letting
it propagate.

Graphs are single-threaded; independent graphs may live on different threads.
"""

import math

import numpy as np

from .errors import ConfigurationError, InputError, NonFiniteError, ShapeError

# When True (default), every op validates that its output is finite.
CHECK_FINITE = True


class Node:
    """One vertex of the computation graph: a value plus gradient plumbing."""

    __slots__ = ("value", "grad", "_parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = value
        self.grad = None
        self._parents = parents
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


def param(data, op="param"):
    """Create a leaf node (learnable parameter or input)."""
    return Node(_as_array(data), op=op)


def constant(data):
    """Create a leaf node for non-learnable data."""
    return Node(_as_array(data), op="const")


def _make(value, parents, op):
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by op {op!r}")
    return Node(value, tuple(parents), op)


def _unbroadcast(g, shape):
    """Reduce gradient g back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    va, vb = a.value, b.value
    try:
        value = va + vb
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {va.shape} with {vb.shape}")
    return _make(
        value,
        [(a, lambda g: _unbroadcast(g, va.shape)),
         (b, lambda g: _unbroadcast(g, vb.shape))],
        "add",
    )


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    va, vb = a.value, b.value
    try:
        value = va * vb
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {va.shape} with {vb.shape}")
    return _make(
        value,
        [(a, lambda g: _unbroadcast(g * vb, va.shape)),
         (b, lambda g: _unbroadcast(g * va, vb.shape))],
        "mul",
    )


def scale(x, s):
    s = float(s)
    return _make(x.value * s, [(x, lambda g: g * s)], "scale")


def matmul(a, b):
    """Matrix product. `a` is [..., m, k]; `b` is [k, n] or same-rank batched."""
    va, vb = a.value, b.value
    if va.ndim < 2 or vb.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {va.shape} and {vb.shape}")
    if vb.ndim == 2:
        if va.shape[-1] != vb.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {va.shape} @ {vb.shape}")
    else:
        if vb.ndim != va.ndim or va.shape[:-2] != vb.shape[:-2] or va.shape[-1] != vb.shape[-2]:
            raise ShapeError(f"matmul: incompatible batched shapes {va.shape} @ {vb.shape}")
    value = va @ vb

    def grad_a(g):
        return g @ np.swapaxes(vb, -1, -2)

    def grad_b(g):
        if vb.ndim == 2 and va.ndim > 2:
            k = va.shape[-1]
            n = g.shape[-1]
            return va.reshape(-1, k).T @ g.reshape(-1, n)
        return np.swapaxes(va, -1, -2) @ g

    return _make(value, [(a, grad_a), (b, grad_b)], "matmul")


def reshape(x, shape):
    old = x.value.shape
    return _make(x.value.reshape(shape), [(x, lambda g: g.reshape(old))], "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.value.transpose(axes), [(x, lambda g: g.transpose(inverse))], "transpose")


def gather_rows(table, indices):
    """Row lookup out of a 2-D table (embedding gather). Gradients scatter-add."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise InputError(f"gather_rows: index out of range for table with {rows} rows")

    def grad_fn(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx, g)
        return out

    return _make(table.value[idx], [(table, grad_fn)], "gather_rows")


def repeat_leading(x, n):
    """Stack `n` copies of x along a new leading axis; gradient sums them."""
    value = np.broadcast_to(x.value[None], (n, *x.value.shape)).copy()
    return _make(value, [(x, lambda g: g.sum(axis=0))], "repeat_leading")


def concat(nodes, axis):
    values = [n.value for n in nodes]
    value = np.concatenate(values, axis=axis)
    parents = []
    offset = 0
    for node in nodes:
        size = node.value.shape[axis]
        start = offset

        def grad_fn(g, start=start, size=size):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            return g[tuple(sl)]

        parents.append((node, grad_fn))
        offset += size
    return _make(value, parents, "concat")


def slice_axis(x, axis, start, stop):
    sl = [slice(None)] * x.value.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def grad_fn(g):
        out = np.zeros_like(x.value)
        out[sl] = g
        return out

    return _make(x.value[sl], [(x, grad_fn)], "slice")


def softmax(x, axis=-1):
    """Stable softmax: rows sum to 1 along `axis`."""
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (g - (g * s).sum(axis=axis, keepdims=True)) * s

    return _make(s, [(x, grad_fn)], "softmax")


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit (biased) variance, then affine."""
    if eps <= 0:
        raise ConfigurationError("layer_norm: eps must be positive")
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = gamma.value * xhat + beta.value

    def grad_x(g):
        gx = g * gamma.value
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    def grad_gamma(g):
        return (g * xhat).reshape(-1, v.shape[-1]).sum(axis=0)

    def grad_beta(g):
        return g.reshape(-1, v.shape[-1]).sum(axis=0)

    return _make(value, [(x, grad_x), (gamma, grad_gamma), (beta, grad_beta)], "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    v = x.value
    u = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(u)
    value = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)

    return _make(value, [(x, grad_fn)], "gelu")


def multihead_attention(x, wq, wk, wv, wo, heads, attn_sink=None):
    """Scaled dot-product self-attention over the token axis.

    `x` is [L, d] or batched [B, L, d]; head dim is d/heads with scale
    1/sqrt(d/heads). If `attn_sink` is a list, the softmaxed attention node
    ([B, heads, L, L]) is appended so attribution code can read (and
    differentiate through) it.
    """
    d = x.value.shape[-1]
    if d % heads != 0:
        raise ConfigurationError(f"embed dim {d} not divisible by {heads} heads")
    squeeze = x.value.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.value.shape)
    batch, length, _ = x.value.shape
    dh = d // heads

    def split(z):
        return transpose(reshape(z, (batch, length, heads, dh)), (0, 2, 1, 3))

    qh = split(matmul(x, wq))
    kh = split(matmul(x, wk))
    vh = split(matmul(x, wv))
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn)
    ctx = matmul(attn, vh)
    out = matmul(reshape(transpose(ctx, (0, 2, 1, 3)), (batch, length, d)), wo)
    if squeeze:
        out = reshape(out, (length, d))
    return out


def cross_entropy(logits, labels):
    """Mean negative log-softmax probability of the true class.

    `logits` is [B, K]; `labels` an int sequence of length B with values in [0, K).
    """
    v = logits.value
    if v.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {v.shape}")
    y = np.asarray(labels, dtype=np.intp)
    batch, k = v.shape
    if y.shape != (batch,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {batch}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    m = v.max(axis=1, keepdims=True)
    z = v - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    value = np.float64(-logp[np.arange(batch), y].mean())

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(batch), y] -= 1.0
        return (float(g) / batch) * p

    return _make(value, [(logits, grad_fn)], "cross_entropy")


def sum_all(x):
    shape = x.value.shape
    return _make(np.float64(x.value.sum()),
                 [(x, lambda g: np.full(shape, float(g)))], "sum")


def mean_all(x):
    shape = x.value.shape
    n = x.value.size
    return _make(np.float64(x.value.mean()),
                 [(x, lambda g: np.full(shape, float(g) / n))], "mean")


def take_scalar(x, index):
    """Pick one element of a 1-D node as a scalar node (for attribution seeds)."""
    i = int(index)
    if x.value.ndim != 1:
        raise ShapeError(f"take_scalar expects a vector, got {x.value.shape}")
    if not 0 <= i < x.value.shape[0]:
        raise InputError(f"index {i} out of range for length {x.value.shape[0]}")

    def grad_fn(g):
        out = np.zeros_like(x.value)
        out[i] = float(g)
        return out

    return _make(np.float64(x.value[i]), [(x, grad_fn)], "take_scalar")


def backward(root, seed=None):
    """Accumulate gradients of `root` into every reachable node's `.grad`.

    Repeated calls on graphs sharing leaf nodes add up, which is how a batch
    split into several sub-graphs contributes to one optimizer step.
    """
    if seed is None:
        seed = np.ones_like(root.value)
    else:
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.value.shape).copy()

    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(order):
        g = node.grad
        if g is None or not node._parents:
            continue
        for parent, fn in node._parents:
            contrib = fn(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def zero_grads(nodes):
    for node in nodes:
        node.grad = None
