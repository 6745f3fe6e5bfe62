"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a local adjoint rule; :func:`backward`
sweeps the recorded graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from evtlab import _kernels
from evtlab.errors import ContractError, DegenerateRowError, ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A node of the computation graph.

    ``op`` names the local adjoint rule that produced the node (``"leaf"`` for
    inputs and parameters).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "name", "_backward")

    def __init__(self, data, requires_grad=False, name=None, *, _parents=(), _op="leaf", _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = _parents
        self.op = _op
        self.name = name
        self._backward = _backward

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _op=op, _backward=backward)
    return Tensor(data, _op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _seqsum(x, axis=-1):
    """Left-to-right sum along ``axis`` (keeps dims). Trailing zeros never change the result."""
    return np.add.accumulate(x, axis=axis).take([-1], axis=axis)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), "add", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), "mul", backward)


def hadamard_const(a, const):
    """Elementwise product with a constant array (no gradient flows into ``const``)."""
    const = np.asarray(const, dtype=np.float64)
    out = a.data * const
    if out.shape != a.shape:
        raise ShapeError(f"constant of shape {const.shape} does not broadcast onto {a.shape}")

    def backward(g):
        return (g * const,)

    return _make(out, (a,), "hadamard_const", backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        return (g * s,)

    return _make(a.data * s, (a,), "scale", backward)


def reshape(a, shape):
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose", backward)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(out, (a,), "gelu", backward)


def take_rows(a, index, axis=-2, pad_value=0.0):
    """Gather slices of ``a`` along ``axis``; index ``-1`` yields ``pad_value``.

    ``index`` may have any shape; it replaces ``axis`` in the output shape.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    n = a.shape[axis]
    if index.size and (index.max() >= n or index.min() < -1):
        raise IndexError(f"gather index out of range for axis of length {n}")
    pad_shape = list(a.shape)
    pad_shape[axis] = 1
    padded = np.concatenate([a.data, np.full(pad_shape, pad_value)], axis=axis)
    safe = np.where(index < 0, n, index)
    out = np.take(padded, safe.reshape(-1), axis=axis)
    out_shape = a.shape[:axis] + index.shape + a.shape[axis + 1:]
    out = out.reshape(out_shape)
    flat = safe.reshape(-1)
    real = flat < n

    def backward(g):
        gflat = g.reshape(a.shape[:axis] + (flat.size,) + a.shape[axis + 1:])
        grad = np.zeros(a.shape)
        gsel = np.compress(real, gflat, axis=axis)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, flat[real], np.moveaxis(gsel, axis, 0))
        return (grad,)

    return _make(out, (a,), "take_rows", backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product with row-major sequential accumulation.

    ``a`` is (..., m, k); ``b`` is (k, n) or (..., k, n) with the same
    leading dimensions as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = _kernels.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _kernels.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = _kernels.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _kernels.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


# ---------------------------------------------------------------------------
# normalisations


def masked_softmax_rows(m, mask=None):
    """Softmax over the last axis restricted to entries where ``mask`` is True.

    Excluded entries come out as exactly 0. The row maximum is taken over the
    included entries only and row sums are accumulated left to right.
    """
    m = as_tensor(m)
    x = m.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not keep.any(axis=-1).all():
        raise DegenerateRowError("softmax row has no unmasked entry")
    shifted = np.where(keep, x, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    y = e / _seqsum(e)

    def backward(g):
        return (y * (g - _seqsum(g * y)),)

    return _make(y, (m,), "softmax", backward)


def normalize_rows(a):
    """Divide each last-axis row by its (sequential) sum."""
    s = _seqsum(a.data)
    y = a.data / s

    def backward(g):
        return ((g - _seqsum(g * y)) / s,)

    return _make(y, (a,), "normalize_rows", backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """LayerNorm over the last axis with population variance."""
    if eps < 0:
        raise ContractError("eps must be non-negative")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), "layer_norm", backward)


# ---------------------------------------------------------------------------
# convolutions


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def depthwise_conv2d(x, kernel, stride=1, pad=0, bias=None):
    """Per-channel 2D cross-correlation with zero padding.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernel`` is (C, kh, kw) with odd
    kernel sides.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    c, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"kernel sides must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    if xd.shape[1] != c:
        raise ShapeError(f"depthwise kernel has {c} channels, input has {xd.shape[1]}")
    h, w = xd.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    out = _kernels.dwconv2d(xd, kernel.data, stride, pad)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = gk = None
        if x.requires_grad:
            gx = _kernels.dwconv2d_grad_input(g4, kernel.data, xd.shape, stride, pad)
            gx = gx[0] if squeeze else gx
        if kernel.requires_grad:
            gk = _kernels.dwconv2d_grad_weight(g4, xd, kernel.shape, stride, pad)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, "depthwise_conv2d", backward)


def _im2col(xp, kh, kw, stride, ho, wo):
    nb, c = xp.shape[:2]
    cols = np.empty((nb, ho, wo, c, kh, kw))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(nb * ho * wo, c * kh * kw)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Dense 2D cross-correlation. ``x`` (B, Cin, H, W), ``weight`` (Cout, Cin, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    nb, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d expects {cin_w} input channels, got {cin}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = _kernels.matmul(cols, np.ascontiguousarray(wmat.T))
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(nb, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gcols = _kernels.matmul(g2, wmat).reshape(nb, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        gcols[..., i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        if weight.requires_grad:
            gw = _kernels.matmul(np.ascontiguousarray(g2.T), cols).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(np.ascontiguousarray(out), parents, "conv2d", backward)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nb = z.shape[0]
    loss = -logp[np.arange(nb), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(nb), labels] -= 1.0
        return (g * p / nb,)

    return _make(np.asarray(loss), (logits,), "cross_entropy", backward)


# ---------------------------------------------------------------------------
# gradient engine


def _topo_order(root):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Reverse-mode sweep from a scalar ``root``.

    Sets ``.grad`` on every reachable leaf that requires gradients and returns
    a ``{leaf: gradient}`` map.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones(root.shape)}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    ``f`` receives a float64 array shaped like ``x`` and returns a float.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
