"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a numpy array plus an operation record: every differentiable
op attaches a closure that routes the output gradient back to its parents.
``backward`` on a scalar runs those closures in reverse topological order.
Records are confined to a single thread; independent records may run in
parallel.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back onto `shape`."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a, b):
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a, b):
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn)


def div(a, b):
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward_fn)


def power(a, exponent):
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward_fn)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward_fn)


def relu(a):
    out_data = np.maximum(a.data, 0)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(out_data, (a,), backward_fn)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(out_data, (a,), backward_fn)


def transpose(a, axes):
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _make(out_data, (a,), backward_fn)


def tensor_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not a.requires_grad:
            return
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward_fn)


def tensor_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def concat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make(out_data, tensors, backward_fn)


# -- probability ops ----------------------------------------------------------

def softmax(logits, axis=-1):
    """Max-stabilized softmax along `axis`; rows sum to one."""
    x = logits.data
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if logits.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            logits.accumulate_grad(out_data * (g - inner))

    return _make(out_data, (logits,), backward_fn)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under softmax(logits).

    Fuses the softmax for stability; `targets` is one label per batch row.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets for {n} rows, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target label out of range [0, {c})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    out_data = np.asarray(-log_probs[np.arange(n), targets].mean(), dtype=x.dtype)

    def backward_fn(g):
        if logits.requires_grad:
            grad = np.exp(log_probs)
            grad[np.arange(n), targets] -= 1.0
            logits.accumulate_grad(g * grad / n)

    return _make(out_data, (logits,), backward_fn)


# -- spatial ops (kernel-backed) ----------------------------------------------

def conv2d(x, weight, bias, stride=1, padding=0):
    """2-d cross-correlation of NCHW input with OIHW filters plus bias."""
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"convolution expects {ci} input channels, got {c}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    oh, ow = _kernels.conv_out_hw(h, w, kh, kw, sh, sw, ph, pw)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    cols = _kernels.im2col(x.data, kh, kw, sh, sw, ph, pw)
    w_flat = weight.data.reshape(o, c * kh * kw)
    out_flat = cols @ w_flat.T + bias.data
    out_data = np.ascontiguousarray(
        out_flat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        if bias.requires_grad:
            bias.accumulate_grad(g_flat.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad((g_flat.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            dcols = g_flat @ w_flat
            x.accumulate_grad(
                _kernels.col2im(dcols, n, c, h, w, kh, kw, sh, sw, ph, pw))

    return _make(out_data, (x, weight, bias), backward_fn)


def max_pool2d(x, kernel, stride=None):
    """Window maximum over NCHW input; stride defaults to the kernel size."""
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if stride is None:
        sh, sw = kh, kw
    else:
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ValueError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    out_data, idx = _kernels.maxpool_forward(x.data, kh, kw, sh, sw)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(_kernels.maxpool_backward(g, idx, h, w, kh, kw, sh, sw))

    return _make(out_data, (x,), backward_fn)


# -- backward pass ------------------------------------------------------------

def backward(loss):
    """Propagate d(loss)/d(node) to every reachable tensor's `.grad`.

    `loss` must be a scalar. Gradients accumulate across calls; zero them
    explicitly between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    visited = set()
    in_progress = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            in_progress.discard(id(node))
            order.append(node)
            continue
        if id(node) in visited:
            if id(node) in in_progress:
                raise RuntimeError("cycle detected in the operation record")
            continue
        visited.add(id(node))
        in_progress.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
            elif id(parent) in in_progress:
                raise RuntimeError("cycle detected in the operation record")

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def assert_finite(array, context):
    if not np.isfinite(array).all():
        raise FloatingPointError(f"non-finite values in {context}")
