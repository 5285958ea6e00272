"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer and a backward
closure. Ops build the graph eagerly; calling backward() on a scalar loss
topologically sorts the graph, zeroes every gradient buffer, then runs the
chain rule. Gradients propagate only into subgraphs that contain a tensor
marked requires_grad, so constant inputs cost nothing extra.

Backward closures take the output gradient as an argument and may capture
parent tensors and saved arrays, never the output tensor itself: the graph
stays acyclic in object references, so a finished graph is reclaimed by
reference counting the moment the loss goes out of scope. Training loops
rely on that; holding multi-hundred-MB graphs until the cycle collector
gets around to them exhausts memory.

Convolution lowers to im2col + GEMM through the kernels module, which gives
the numba/numpy backend split for free. All ops preserve the input dtype;
training runs float32, finite-difference checks run float64.
"""

import numpy as np

from . import kernels
from .errors import GraphError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise GraphError("loss is not finite")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return _make(a.data / b.data, (a, b), bw)


def exp(a):
    y = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a.grad += g * y

    return _make(y, (a,), bw)


def log(a):
    def bw(g):
        if a.requires_grad:
            a.grad += g / a.data

    return _make(np.log(a.data), (a,), bw)


def sigmoid(a):
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bw(g):
        if a.requires_grad:
            a.grad += g * y * (1.0 - y)

    return _make(y, (a,), bw)


def softplus(a):
    x = a.data
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        if a.requires_grad:
            x_ = a.data
            s = np.empty_like(x_)
            pos = x_ >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x_[pos]))
            ex = np.exp(x_[~pos])
            s[~pos] = ex / (1.0 + ex)
            a.grad += g * s

    return _make(y, (a,), bw)


def leaky_relu(a, alpha=0.2):
    def bw(g):
        if a.requires_grad:
            a.grad += g * np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)

    return _make(np.where(a.data > 0, a.data, alpha * a.data), (a,), bw)


def absolute(a):
    def bw(g):
        if a.requires_grad:
            a.grad += g * np.sign(a.data)

    return _make(np.abs(a.data), (a,), bw)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only strictly inside."""

    def bw(g):
        if a.requires_grad:
            inside = (a.data > lo) & (a.data < hi)
            a.grad += g * inside.astype(a.data.dtype)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / float(count), a.dtype))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul handles 2D operands; use linear/conv2d for layers")

    def bw(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b):
    """x (N,D) @ w (D,K) + b (K,)."""

    def bw(g):
        if x.requires_grad:
            x.grad += g @ w.data.T
        if w.requires_grad:
            w.grad += x.data.T @ g
        if b.requires_grad:
            b.grad += g.sum(axis=0)

    return _make(x.data @ w.data + b.data, (x, w, b), bw)


def reshape(a, shape):
    def bw(g):
        if a.requires_grad:
            a.grad += g.reshape(a.data.shape)

    return _make(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis=1):
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + size)
                t.grad += g[tuple(idx)]
            start += size

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def broadcast_hw(z, h, w):
    """Tile (N,Z) to (N,Z,h,w). Adjoint is the spatial sum."""
    if z.data.ndim != 2:
        raise ShapeError(f"broadcast_hw expects (N,Z), got {z.data.shape}")

    def bw(g):
        if z.requires_grad:
            z.grad += g.sum(axis=(2, 3))

    return _make(np.broadcast_to(z.data[:, :, None, None], z.data.shape + (h, w)).copy(), (z,), bw)


def upsample2x(a):
    """Nearest-neighbor 2x upsampling of (N,C,H,W)."""
    n, c, h, w = a.data.shape

    def bw(g):
        if a.requires_grad:
            a.grad += g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _make(np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3), (a,), bw)


def global_avg_pool(a):
    """(N,C,H,W) -> (N,C) spatial mean."""
    n, c, h, w = a.data.shape

    def bw(g):
        if a.requires_grad:
            a.grad += np.broadcast_to(g[:, :, None, None] / (h * w), a.data.shape)

    return _make(a.data.mean(axis=(2, 3)), (a,), bw)


def conv2d(x, w, b, stride=1, pad=0):
    """x (N,C,H,W), w (F,C,kh,kw), b (F,) -> (N,F,OH,OW)."""
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)  # (N, C*kh*kw, L)
    w2 = w.data.reshape(f, c * kh * kw)
    y = np.matmul(w2, cols) + b.data[:, None]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1

    def bw(g):
        g2 = g.reshape(n, f, oh * ow)
        if w.requires_grad:
            w.grad += np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        if b.requires_grad:
            b.grad += g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x.grad += kernels.col2im(dcols, h, wd, kh, kw, stride, pad)

    return _make(y.reshape(n, f, oh, ow), (x, w, b), bw)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization of (N,C,H,W) over H,W with a
    learnable channel affine."""
    n, c, h, w = x.data.shape
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    s = np.sqrt(var + eps)
    xhat = xc / s
    g4 = gamma.data.reshape(1, c, 1, 1)

    def bw(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            beta.grad += g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * g4
            m1 = dxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            x.grad += (dxhat - m1 - xhat * m2) / s

    return _make(g4 * xhat + beta.data.reshape(1, c, 1, 1), (x, gamma, beta), bw)


def masked_l1(pred, truth, mask):
    """Mean absolute error over mask>0 pixels. truth and mask are plain
    arrays (no gradient); an empty mask yields exactly 0."""
    truth = np.asarray(truth, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    mask = np.broadcast_to(mask, pred.data.shape)
    denom = float(mask.sum())
    if denom == 0:
        return _make(np.asarray(0.0, dtype=pred.dtype), (pred,), lambda g: None)
    diff = pred.data - truth

    def bw(g):
        if pred.requires_grad:
            pred.grad += g * np.sign(diff) * mask / denom

    return _make(np.asarray((np.abs(diff) * mask).sum() / denom, dtype=pred.dtype), (pred,), bw)
