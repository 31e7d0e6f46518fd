"""Dense tensor with reverse-mode automatic differentiation.

Row-major contiguous numpy buffers only, no strided views. A Graph is a
tape recorded fresh for every forward pass; ops append nodes only while a
Graph context is open and at least one input requires gradients. Outside a
Graph context everything is plain numpy forward math.

f32 is the working precision; gradient-check suites build their inputs in
f64 and the ops follow the input dtype.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Graph",
    "NumericError",
    "ShapeError",
    "no_grad",
    "backward",
    "finite_difference_gradient",
    "add", "sub", "mul", "div", "neg", "pow_scalar",
    "matmul", "transpose", "reshape", "concat", "gather_rows",
    "exp", "log", "sqrt", "abs_", "maximum", "minimum", "clip",
    "relu", "gelu", "sigmoid", "tanh",
    "softmax_rows", "layer_norm",
    "sum_", "mean_",
    "conv2d", "batch_norm",
]


class NumericError(RuntimeError):
    """A forward op produced NaN/Inf from finite inputs."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


# NaN/Inf screening at op boundaries; off by default, enabled for debugging.
_DEBUG_CHECKS = os.environ.get("TOKENTRACK_DEBUG_CHECKS", "0") == "1"


def set_debug_checks(enabled):
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """Dense n-d array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data = np.ascontiguousarray(arr).reshape(arr.shape)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._is_leaf = True

    # -- introspection ----------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# -- tape ------------------------------------------------------------------


class _Node:
    __slots__ = ("out", "parents", "vjp", "op")

    def __init__(self, out, parents, vjp, op):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Graph:
    """Tape of recorded ops in execution (= topological) order.

    Opened as a context manager around a forward pass; ops record onto the
    innermost open graph. Recorded fresh per forward, never reused.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss):
        backward(self, loss)


_GRAPH_STACK = []


class no_grad:
    """Context that suspends tape recording."""

    def __enter__(self):
        _GRAPH_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False


def _active_graph():
    if _GRAPH_STACK and _GRAPH_STACK[-1] is not None:
        return _GRAPH_STACK[-1]
    return None


def _make(out_data, parents, vjp, op):
    """Wrap an op result, recording a tape node when gradients are live."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    g = _active_graph()
    track = g is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data)
    if track:
        out.requires_grad = True
        out._is_leaf = False
        g.nodes.append(_Node(out, parents, vjp, op))
    return out


def backward(graph, loss):
    """Accumulate dLoss/dLeaf into every requires_grad leaf of the tape."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("backward expects a scalar loss tensor")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        parent_grads = node.vjp(g_out)
        for p, g in zip(node.parents, parent_grads):
            if g is None or not p.requires_grad:
                continue
            if p._is_leaf:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += g.astype(p.data.dtype, copy=False)
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    out = a.data + b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    out = a.data - b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    out = a.data * b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a, p):
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a):
    out = np.abs(a.data)
    return _make(out, (a,), lambda g: (g * np.sign(a.data),), "abs")


def maximum(a, b):
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape),
                            _unbroadcast(g * ~mask, b.shape)), "maximum")


def minimum(a, b):
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape),
                            _unbroadcast(g * ~mask, b.shape)), "minimum")


def clip(a, lo, hi):
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp, "gelu")


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# -- shape ops ---------------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), vjp, "matmul")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


def gather_rows(a, indices):
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp, "gather_rows")


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def mean_(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- normalizers --------------------------------------------------------------


def softmax_rows(x):
    """Numerically stabilized softmax along the last dim; rows sum to 1."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last dim, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp, "softmax_rows")


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalize over the last dim to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * weight.data + bias.data

    def vjp(g):
        gw = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        gb = g.sum(axis=tuple(range(g.ndim - 1)))
        gx_hat = g * weight.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), vjp, "layer_norm")


# -- spatial ops ---------------------------------------------------------------


def _im2col(x, kh, kw):
    # x: (C, H, W), stride 1, same padding
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh * kw, h * w), dtype=x.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[:, k, :] = xp[:, i:i + h, j:j + w].reshape(c, h * w)
            k += 1
    return cols.reshape(c * kh * kw, h * w)


def _col2im(cols, shape, kh, kw):
    c, h, w = shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(c, kh * kw, h * w)
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + h, j:j + w] += cols[:, k, :].reshape(c, h, w)
            k += 1
    return xp[:, ph:ph + h, pw:pw + w]


def conv2d(x, weight, bias):
    """2-D convolution, stride 1, same padding. x: (Cin,H,W); weight: (Cout,Cin,kh,kw)."""
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d shapes: x {x.shape}, weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    _, h, w = x.shape
    cols = _im2col(x.data, kh, kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(cout, h, w) + bias.data.reshape(cout, 1, 1)

    def vjp(g):
        gmat = g.reshape(cout, h * w)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gb = gmat.sum(axis=1)
        gx = _col2im(wmat.T @ gmat, x.shape, kh, kw)
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), vjp, "conv2d")


def batch_norm(x, weight, bias, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalization of a (C,H,W) map.

    Training uses the current map's channel statistics and updates the
    running buffers in place; eval is a fixed affine map from the running
    statistics (same input, same output, every call).
    """
    if x.ndim != 3:
        raise ShapeError(f"batch_norm expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    n = h * w
    if training:
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).reshape(c, 1, 1)
    xhat = (x.data - mu.reshape(c, 1, 1)) * inv
    out = xhat * weight.data.reshape(c, 1, 1) + bias.data.reshape(c, 1, 1)

    def vjp(g):
        gw = (g * xhat).sum(axis=(1, 2))
        gb = g.sum(axis=(1, 2))
        gx_hat = g * weight.data.reshape(c, 1, 1)
        if training:
            m1 = gx_hat.mean(axis=(1, 2), keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=(1, 2), keepdims=True)
            gx = inv * (gx_hat - m1 - xhat * m2)
        else:
            gx = inv * gx_hat
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), vjp, "batch_norm")


# -- oracle --------------------------------------------------------------------


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, element by element.

    The independent oracle for every autodiff gradient check; evaluate in
    f64 or the truncation error swamps the comparison.
    """
    x0 = x.data.astype(np.float64).copy()
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x0.copy())).item())
            flat[i] = orig - h
            fm = float(f(Tensor(x0.copy())).item())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite function value in finite differences")
            gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
