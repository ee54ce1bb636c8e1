"""Small layer framework: parameter registry plus the standard layers.

Modules auto-register parameters (Tensors with requires_grad) and child
modules assigned as attributes.  Buffers (batchnorm running statistics) are
registered explicitly so they round-trip through checkpoints without ever
receiving gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, add, conv2d, linear

__all__ = ["Module", "Linear", "Conv2d", "LayerNorm", "BatchNorm", "kaiming_uniform"]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Base class providing named parameter / buffer / child traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float32)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)
        return arr

    def set_buffer(self, name: str, arr: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.w = Tensor(kaiming_uniform(rng, (in_features, out_features), in_features),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        fan_in = in_channels * kernel * kernel
        self.w = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_channels, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import reshape

        out = conv2d(x, self.w, self.stride)
        if self.b is not None:
            out = add(out, reshape(self.b, (1, self.b.size, 1, 1)))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import layernorm

        if x.shape[-1] != self.dim:
            raise DimensionError(f"layernorm expects last dim {self.dim}, got {x.shape}")
        return layernorm(x, self.gamma, self.beta)


class BatchNorm(Module):
    """Batch normalization over all axes except the feature axis.

    Training mode normalizes with batch statistics and updates running
    averages with momentum 0.1; eval mode normalizes with the running
    averages.  ``feature_axis`` is 1 for conv maps [B,C,H,W] and -1 for
    token features [..., d].
    """

    def __init__(self, num_features: int, feature_axis: int = -1, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.feature_axis = feature_axis
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, np.float32))
        self.register_buffer("running_var", np.ones(num_features, np.float32))

    def _param_shape(self, ndim: int):
        axis = self.feature_axis % ndim
        shape = [1] * ndim
        shape[axis] = self.num_features
        return tuple(shape), axis

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import normalize_affine, reshape

        shape, axis = self._param_shape(x.ndim)
        if x.shape[axis] != self.num_features:
            raise DimensionError(
                f"batchnorm expects {self.num_features} features on axis {axis}, got {x.shape}"
            )
        reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
        gamma = reshape(self.gamma, shape)
        beta = reshape(self.beta, shape)
        if self.training:
            mu = x.data.mean(axis=reduce_axes, keepdims=True, dtype=np.float32)
            var = np.square(x.data).mean(axis=reduce_axes, keepdims=True,
                                         dtype=np.float32) - mu * mu
            np.maximum(var, 0.0, out=var)
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mu.reshape(-1)
            self.running_var *= 1.0 - m
            self.running_var += m * var.reshape(-1)
            return normalize_affine(x, gamma, beta, reduce_axes,
                                    stats=(mu, var), through_stats=True)
        mu = self.running_mean.reshape(shape)
        var = self.running_var.reshape(shape)
        return normalize_affine(x, gamma, beta, reduce_axes,
                                stats=(mu, var), through_stats=False)
