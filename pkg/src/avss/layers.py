"""Layer building blocks on top of the autodiff engine."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DegenerateBatch, ShapeMismatch
from .tensor import Tensor


def parameter(array):
    return Tensor(np.asarray(array, dtype=T.default_dtype()), requires_grad=True)


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: tracks parameters/submodules by attribute insertion order."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name == "training":
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map on the last axis: y = x @ W^T + b."""

    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.weight = parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        out = T.matmul(flat, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = out + self.bias
        if x.ndim != 2:
            out = out.reshape(lead + (self.weight.shape[0],))
        return out


class _ConvNd(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng, bias=True,
                 ndim=2, dilation=1):
        super().__init__()
        kernel = kernel if isinstance(kernel, (tuple, list)) else (kernel,) * ndim
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = parameter(kaiming_uniform(rng, (out_ch, in_ch) + tuple(kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x):
        return T.conv_nd(x, self.weight, self.bias, self.stride, self.padding,
                         self.dilation)


class Conv1d(_ConvNd):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True,
                 dilation=1):
        super().__init__(in_ch, out_ch, kernel, stride, padding, rng, bias,
                         ndim=1, dilation=dilation)


class Conv2d(_ConvNd):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__(in_ch, out_ch, kernel, stride, padding, rng, bias, ndim=2)


class Conv3d(_ConvNd):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__(in_ch, out_ch, kernel, stride, padding, rng, bias, ndim=3)


class BatchNorm(Module):
    """Batch normalization over (batch, *spatial) per channel.

    Train mode normalizes by batch statistics and updates running stats with
    `momentum`; eval mode uses the running stats.  Train mode refuses batches
    of one.
    """

    def __init__(self, num_channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = parameter(np.ones(num_channels))
        self.beta = parameter(np.zeros(num_channels))
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(num_channels, dtype=T.default_dtype())
        self.running_var = np.ones(num_channels, dtype=T.default_dtype())

    def forward(self, x):
        if x.ndim < 2:
            raise ShapeMismatch(f"batch norm needs (B, C, ...) input, got {x.shape}")
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeMismatch(
                f"batch norm over {self.gamma.shape[0]} channels got input {x.shape}"
            )
        axes = (0,) + tuple(range(2, x.ndim))
        shape = (1, -1) + (1,) * (x.ndim - 2)
        if self.training:
            if x.shape[0] < 2:
                raise DegenerateBatch(
                    f"batch of {x.shape[0]} cannot be normalized in train mode"
                )
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            xn = centered / T.sqrt(var + self.eps)
            n = x.size // x.shape[1]
            with np.errstate(all="ignore"):
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
                unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
                self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            mean = self.running_mean.reshape(shape)
            scale = 1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps)
            xn = (x - mean) * scale
        return self.gamma.reshape(shape) * xn + self.beta.reshape(shape)
