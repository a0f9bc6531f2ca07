"""Layers with explicit forward/backward passes.

Activations use a channels-last layout: ``(batch, length, channels)`` for
sequence layers and ``(batch, features)`` after pooling/flattening. Layers
are dtype-agnostic; the training path runs float32 and gradient checks run
float64.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import StructuralError


def glorot_init(shape, fan_in, fan_out, seed=None, dtype=np.float32):
    """Uniform Glorot/Xavier draw with bound sqrt(6 / (fan_in + fan_out)).

    ``seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def resolve_padding(padding, kernel):
    if padding == "same":
        return (kernel - 1) // 2
    if padding == "valid" or padding is None:
        return 0
    return int(padding)


def conv_output_length(length, kernel, stride, pad):
    return (length + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Functional convolution
# ---------------------------------------------------------------------------


def _im2col(x, kernel, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    n, length, c = x.shape
    l_out = (length - kernel) // stride + 1
    if l_out < 1:
        raise StructuralError(f"conv input length {length - 2 * pad} shorter than kernel {kernel}")
    win = sliding_window_view(x, kernel, axis=1)[:, ::stride][:, :l_out]
    return np.ascontiguousarray(win).reshape(n * l_out, c * kernel), l_out


def conv1d_forward(x, weights, bias, stride=1, padding="valid"):
    """Cross-correlation of ``x (N, L, C_in)`` with ``weights (C_out, C_in, k)``.

    Returns ``(y, cache)`` with ``y`` shaped ``(N, L_out, C_out)``.
    """
    c_out, c_in, k = weights.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise StructuralError(f"conv expects (N, L, {c_in}) input, got {x.shape}")
    pad = resolve_padding(padding, k)
    cols, l_out = _im2col(x, k, stride, pad)
    w2 = weights.reshape(c_out, c_in * k)
    y = cols @ w2.T
    if bias is not None:
        y += bias
    cache = (cols, x.shape, weights, stride, pad, l_out)
    return y.reshape(x.shape[0], l_out, c_out), cache


def conv1d_backward(dy, cache):
    """Gradients ``(dx, dw, db)`` for :func:`conv1d_forward`."""
    cols, x_shape, weights, stride, pad, l_out = cache
    c_out, c_in, k = weights.shape
    n, length, _ = x_shape
    dy2 = dy.reshape(n * l_out, c_out)
    dw = (dy2.T @ cols).reshape(weights.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ weights.reshape(c_out, c_in * k)).reshape(n, l_out, c_in, k)
    dxp = np.zeros((n, length + 2 * pad, c_in), dtype=dy.dtype)
    span = stride * (l_out - 1) + 1
    for j in range(k):
        dxp[:, j : j + span : stride, :] += dcols[:, :, :, j]
    dx = dxp[:, pad : pad + length, :] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# Layer classes
# ---------------------------------------------------------------------------


class Layer:
    """Base layer. Subclasses fill ``params``/``grads`` and optional ``buffers``."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def param_slots(self, prefix=""):
        """Yield ``(qualified_name, layer, key)`` for every trainable array."""
        for name in self.params:
            yield prefix + name, self, name

    def buffer_slots(self, prefix=""):
        for name in self.buffers:
            yield prefix + name, self, name

    def zero_grads(self):
        for name, value in self.params.items():
            g = self.grads.get(name)
            if g is None or g.shape != value.shape or g.dtype != value.dtype:
                self.grads[name] = np.zeros_like(value)
            else:
                g.fill(0)

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        self.zero_grads()


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding="same", rng=None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.kernel = kernel
        fan_in, fan_out = in_channels * kernel, out_channels * kernel
        self.params["w"] = glorot_init((out_channels, in_channels, kernel), fan_in, fan_out, rng)
        self.params["b"] = np.zeros(out_channels, dtype=np.float32)
        self.zero_grads()

    def forward(self, x, training=False):
        y, self._cache = conv1d_forward(x, self.params["w"], self.params["b"], self.stride,
                                        self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = conv1d_backward(dy, self._cache)
        self.grads["w"] += dw
        self.grads["b"] += db
        return dx

    def output_shape(self, shape):
        length, _ = shape
        pad = resolve_padding(self.padding, self.kernel)
        out = conv_output_length(length, self.kernel, self.stride, pad)
        if out < 1:
            raise StructuralError(f"conv kernel {self.kernel} too long for length {length}")
        return out, self.params["w"].shape[0]


class BatchNorm1d(Layer):
    """Per-channel batch normalization over the batch and length axes."""

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)
        self.zero_grads()

    def _axes(self, x):
        return tuple(range(x.ndim - 1))

    def forward(self, x, training=False):
        axes = self._axes(x)
        if training:
            if x.shape[0] < 2:
                raise StructuralError("batchnorm in training mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, training)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy):
        xhat, inv, training = self._cache
        axes = self._axes(dy)
        self.grads["gamma"] += (dy * xhat).sum(axis=axes)
        self.grads["beta"] += dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"]
        if not training:
            return dxhat * inv
        m = dy.size // dy.shape[-1]
        return (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool1d(Layer):
    kind = "maxpool1d"

    def __init__(self, kernel=3, stride=2, padding=0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def forward(self, x, training=False):
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (p, p), (0, 0)), constant_values=-np.inf)
        n, length, c = x.shape
        l_out = (length - k) // s + 1
        if l_out < 1:
            raise StructuralError(f"maxpool kernel {k} too long for length {length}")
        win = sliding_window_view(x, k, axis=1)[:, ::s][:, :l_out]
        arg = win.argmax(axis=3)
        y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
        self._cache = (arg, x.shape, l_out)
        return y

    def backward(self, dy):
        arg, shape, l_out = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        dxp = np.zeros(shape, dtype=dy.dtype)
        span = s * (l_out - 1) + 1
        for j in range(k):
            dxp[:, j : j + span : s, :] += dy * (arg == j)
        return dxp[:, p : shape[1] - p, :] if p else dxp

    def output_shape(self, shape):
        length, c = shape
        out = (length + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise StructuralError(f"maxpool kernel {self.kernel} too long for length {length}")
        return out, c


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def forward(self, x, training=False):
        self._length = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy):
        return np.repeat(dy[:, None, :] / self._length, self._length, axis=1)

    def output_shape(self, shape):
        return (shape[1],)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.params["w"] = glorot_init((in_features, out_features), in_features, out_features, rng)
        self.params["b"] = np.zeros(out_features, dtype=np.float32)
        self.zero_grads()

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.params["w"].shape[0]:
            raise StructuralError(
                f"dense expects (N, {self.params['w'].shape[0]}) input, got {x.shape}"
            )
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads["w"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["w"].T

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.params["w"].shape[0]:
            raise StructuralError(
                f"dense layer expects {self.params['w'].shape[0]} features, got shape {shape}"
            )
        return (self.params["w"].shape[1],)


class Dropout(Layer):
    """Inverted dropout; identity in evaluation mode."""

    kind = "dropout"

    def __init__(self, rate=0.5, seed=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x, training=False):
        if not training or self.rate == 0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def param_slots(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.param_slots(f"{prefix}{i}.")

    def buffer_slots(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.buffer_slots(f"{prefix}{i}.")

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)


class ResidualBlock(Layer):
    """Basic (two 3-tap convs) or bottleneck (1-3-1, x4 expansion) residual block.

    ``width`` is the inner channel count; a bottleneck block outputs
    ``4 * width`` channels. ``downsample`` halves the length through a stride-2
    first convolution. A 1x1 projection shortcut is used whenever the shape
    changes; ``project=False`` with a shape change is a structural error.
    """

    def __init__(self, in_channels, width, variant="basic", downsample=False, project=None,
                 rng=None):
        super().__init__()
        if variant not in ("basic", "bottleneck"):
            raise StructuralError(f"unknown residual variant {variant!r}")
        self.variant = variant
        self.kind = "residual_" + variant
        stride = 2 if downsample else 1
        if variant == "basic":
            out = width
            branch = [Conv1d(in_channels, width, 3, stride, "same", rng), BatchNorm1d(width), ReLU(),
                      Conv1d(width, width, 3, 1, "same", rng), BatchNorm1d(width)]
        else:
            out = 4 * width
            branch = [Conv1d(in_channels, width, 1, 1, "valid", rng), BatchNorm1d(width), ReLU(),
                      Conv1d(width, width, 3, stride, "same", rng), BatchNorm1d(width), ReLU(),
                      Conv1d(width, out, 1, 1, "valid", rng), BatchNorm1d(out)]
        needs_projection = downsample or in_channels != out
        if project is None:
            project = needs_projection
        if needs_projection and not project:
            raise StructuralError(
                f"residual block maps {in_channels} -> {out} channels "
                f"(downsample={downsample}) but has no projection shortcut"
            )
        self.out_channels = out
        self.branch = Sequential(branch)
        self.shortcut = (Sequential([Conv1d(in_channels, out, 1, stride, "valid", rng),
                                     BatchNorm1d(out)]) if project else None)
        self.relu = ReLU()

    def forward(self, x, training=False):
        y = self.branch.forward(x, training)
        skip = self.shortcut.forward(x, training) if self.shortcut else x
        if skip.shape != y.shape:
            raise StructuralError(f"residual branch {y.shape} and shortcut {skip.shape} differ")
        return self.relu.forward(y + skip, training)

    def backward(self, dy):
        ds = self.relu.backward(dy)
        dx = self.branch.backward(ds)
        return dx + (self.shortcut.backward(ds) if self.shortcut else ds)

    def output_shape(self, shape):
        out = self.branch.output_shape(shape)
        if self.shortcut:
            self.shortcut.output_shape(shape)
        return out

    def _children(self):
        yield "branch.", self.branch
        if self.shortcut:
            yield "shortcut.", self.shortcut

    def param_slots(self, prefix=""):
        for name, child in self._children():
            yield from child.param_slots(prefix + name)

    def buffer_slots(self, prefix=""):
        for name, child in self._children():
            yield from child.buffer_slots(prefix + name)

    def zero_grads(self):
        for _, child in self._children():
            child.zero_grads()

    def astype(self, dtype):
        for _, child in self._children():
            child.astype(dtype)
