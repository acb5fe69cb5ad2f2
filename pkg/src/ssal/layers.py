"""Layer vocabulary: convolution, batch norm, relu, pooling, linear, softmax
and channel concatenation (used to realize inception-style parallel paths).

A layer is constructed from hyperparameters, then ``build`` materializes its
parameter tensors for a concrete input shape. ``out_shape`` is a pure
function of the input shape, usable before build. Layers are applied in an
explicit "train" or "eval" mode; only batch norm behaves differently between
the two.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import Tensor

MODES = ("train", "eval")


def _init_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "?"

    def __init__(self):
        self.built = False
        self.name = ""

    def out_shape(self, in_shape):
        raise NotImplementedError

    def build(self, in_shape, rng, dtype):
        """Materialize parameters for `in_shape`; returns the output shape."""
        self.built = True
        return self.out_shape(in_shape)

    def apply(self, x, mode):
        raise NotImplementedError

    def parameters(self):
        return []

    def buffers(self):
        """Non-trainable state persisted with checkpoints."""
        return []

    def _shape_error(self, in_shape, why):
        return ValueError(f"{self.kind}: incompatible input shape {tuple(in_shape)} ({why})")


class FullyConnected(Layer):
    kind = "fully_connected"

    def __init__(self, out_features):
        super().__init__()
        if out_features < 1:
            raise ValueError("fully_connected needs a positive output width")
        self.out_features = out_features
        self.in_features = None
        self.weight = None
        self.bias = None

    def out_shape(self, in_shape):
        if len(in_shape) < 2:
            raise self._shape_error(in_shape, "expects a batch dimension")
        return (in_shape[0], self.out_features)

    def build(self, in_shape, rng, dtype):
        self.in_features = int(np.prod(in_shape[1:]))
        self.weight = Tensor(
            _init_uniform(rng, (self.in_features, self.out_features), self.in_features, dtype),
            requires_grad=True, name=f"{self.name}.weight")
        self.bias = Tensor(
            _init_uniform(rng, (self.out_features,), self.in_features, dtype),
            requires_grad=True, name=f"{self.name}.bias")
        self.built = True
        return self.out_shape(in_shape)

    def apply(self, x, mode):
        flat_width = int(np.prod(x.shape[1:]))
        if flat_width != self.in_features:
            raise self._shape_error(
                x.shape, f"flattens to width {flat_width}, layer expects {self.in_features}")
        if len(x.shape) > 2:
            x = T.reshape(x, (x.shape[0], flat_width))
        return T.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class Relu(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def apply(self, x, mode):
        return T.relu(x)


class Convolution2d(Layer):
    kind = "convolution2d"

    def __init__(self, out_channels, kernel, stride=1, padding=0):
        super().__init__()
        self.out_channels = out_channels
        self.kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.stride = stride
        self.padding = padding
        self.in_channels = None
        self.weight = None
        self.bias = None

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise self._shape_error(in_shape, "expects NCHW input")
        n, c, h, w = in_shape
        kh, kw = self.kernel
        oh, ow = _kernels.conv_out_hw(
            h, w, kh, kw, self.stride, self.stride, self.padding, self.padding)
        if oh <= 0 or ow <= 0:
            raise self._shape_error(in_shape, f"kernel {kh}x{kw} does not fit")
        return (n, self.out_channels, oh, ow)

    def build(self, in_shape, rng, dtype):
        out = self.out_shape(in_shape)
        self.in_channels = in_shape[1]
        kh, kw = self.kernel
        fan_in = self.in_channels * kh * kw
        self.weight = Tensor(
            _init_uniform(rng, (self.out_channels, self.in_channels, kh, kw), fan_in, dtype),
            requires_grad=True, name=f"{self.name}.weight")
        self.bias = Tensor(
            _init_uniform(rng, (self.out_channels,), fan_in, dtype),
            requires_grad=True, name=f"{self.name}.bias")
        self.built = True
        return out

    def apply(self, x, mode):
        if len(x.shape) != 4 or x.shape[1] != self.in_channels:
            raise self._shape_error(
                x.shape, f"expects {self.in_channels} channels in NCHW layout")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm2d(Layer):
    kind = "batch_norm2d"

    def __init__(self, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.channels = None
        self.scale = None
        self.shift = None
        self.running_mean = None
        self.running_var = None
        self.batches_seen = 0

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise self._shape_error(in_shape, "expects NCHW input")
        return tuple(in_shape)

    def build(self, in_shape, rng, dtype):
        out = self.out_shape(in_shape)
        self.channels = in_shape[1]
        self.scale = Tensor(np.ones(self.channels, dtype=dtype),
                            requires_grad=True, name=f"{self.name}.scale")
        self.shift = Tensor(np.zeros(self.channels, dtype=dtype),
                            requires_grad=True, name=f"{self.name}.shift")
        self.running_mean = np.zeros(self.channels, dtype=dtype)
        self.running_var = np.ones(self.channels, dtype=dtype)
        self.batches_seen = 0
        self.built = True
        return out

    def apply(self, x, mode):
        if len(x.shape) != 4 or x.shape[1] != self.channels:
            raise self._shape_error(x.shape, f"expects {self.channels} channels")
        axes = (0, 2, 3)
        shape = (1, self.channels, 1, 1)
        if mode == "train":
            mean = x.mean(axis=axes, keepdims=True)
            var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mean.data.reshape(-1).astype(self.running_mean.dtype))
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data.reshape(-1).astype(self.running_var.dtype))
            self.batches_seen += 1
        else:
            mean = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
        normalized = (x - mean) * ((var + self.eps) ** -0.5)
        return (normalized * T.reshape(self.scale, shape)) + T.reshape(self.shift, shape)

    def parameters(self):
        return [self.scale, self.shift]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class MaxPool2d(Layer):
    kind = "max_pool2d"

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise self._shape_error(in_shape, "expects NCHW input")
        n, c, h, w = in_shape
        if self.kernel > h or self.kernel > w:
            raise self._shape_error(in_shape, f"pool window {self.kernel} does not fit")
        oh = (h - self.kernel) // self.stride + 1
        ow = (w - self.kernel) // self.stride + 1
        return (n, c, oh, ow)

    def apply(self, x, mode):
        self.out_shape(x.shape)
        return T.max_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise self._shape_error(in_shape, "expects NCHW input")
        return (in_shape[0], in_shape[1])

    def apply(self, x, mode):
        self.out_shape(x.shape)
        return x.mean(axis=(2, 3))


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def apply(self, x, mode):
        return T.softmax(x, self.axis)


class Concat(Layer):
    """Applies parallel layer stacks to one input and joins them on the
    channel axis. With convolution paths of distinct kernel sizes this is
    the inception-style block."""

    kind = "concat"

    def __init__(self, paths):
        super().__init__()
        if not paths:
            raise ValueError("concat needs at least one path")
        self.paths = [list(p) for p in paths]

    def out_shape(self, in_shape):
        shapes = []
        for path in self.paths:
            shape = tuple(in_shape)
            for layer in path:
                shape = layer.out_shape(shape)
            shapes.append(shape)
        base = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
                raise ValueError(f"concat paths disagree on shape: {shapes}")
        channels = sum(s[1] for s in shapes)
        return (base[0], channels) + tuple(base[2:])

    def build(self, in_shape, rng, dtype):
        for pi, path in enumerate(self.paths):
            shape = tuple(in_shape)
            for li, layer in enumerate(path):
                layer.name = f"{self.name}.path{pi}.{li}_{layer.kind}"
                shape = layer.build(shape, rng, dtype)
        self.built = True
        return self.out_shape(in_shape)

    def apply(self, x, mode):
        outs = []
        for path in self.paths:
            y = x
            for layer in path:
                y = layer.apply(y, mode)
            outs.append(y)
        return T.concat(outs, axis=1)

    def parameters(self):
        return [p for path in self.paths for layer in path for p in layer.parameters()]

    def buffers(self):
        return [b for path in self.paths for layer in path for b in layer.buffers()]


def apply_layer(layer, x, mode):
    """Validated single-layer application.

    Rejects unknown modes, non-finite inputs and shape mismatches (with a
    diagnostic naming the layer kind and both shapes), then records the op.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not layer.built:
        raise RuntimeError(f"{layer.kind}: layer not built")
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"{layer.kind}: non-finite input")
    expected = layer.out_shape(x.shape)
    out = layer.apply(x, mode)
    if out.shape != tuple(expected):
        raise AssertionError(
            f"{layer.kind}: inferred shape {expected} != computed {out.shape}")
    return out


# -- compact layer syntax -------------------------------------------------------

def layer_from_string(text):
    """Parse one layer from its compact config form.

    Forms: ``fc:W``, ``relu``, ``conv:C:K[:sS][:pP]``, ``bn``, ``maxpool:K``,
    ``gap``, ``softmax``, ``inception:C:K1,K2,...`` (parallel same-padded
    convolutions of width C joined by channel concat).
    """
    parts = text.strip().split(":")
    head = parts[0]
    if head == "fc":
        return FullyConnected(int(parts[1]))
    if head == "relu":
        return Relu()
    if head == "conv":
        out_channels, kernel = int(parts[1]), int(parts[2])
        stride, padding = 1, 0
        for extra in parts[3:]:
            if extra.startswith("s"):
                stride = int(extra[1:])
            elif extra.startswith("p"):
                padding = int(extra[1:])
            else:
                raise ValueError(f"unknown conv option {extra!r} in {text!r}")
        return Convolution2d(out_channels, kernel, stride, padding)
    if head == "bn":
        return BatchNorm2d()
    if head == "maxpool":
        return MaxPool2d(int(parts[1]))
    if head == "gap":
        return GlobalAvgPool()
    if head == "softmax":
        return Softmax()
    if head == "inception":
        width = int(parts[1])
        kernels = [int(k) for k in parts[2].split(",")]
        paths = [[Convolution2d(width, k, 1, k // 2), BatchNorm2d(), Relu()]
                 for k in kernels]
        return Concat(paths)
    raise ValueError(f"unknown layer spec {text!r}")


def layers_from_strings(texts):
    return [layer_from_string(t) for t in texts]
