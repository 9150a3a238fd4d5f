"""Encoder/decoder building blocks: DWS conv, batch norm, transposed conv,
channel layer norm, and the Module/parameter-registry base."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn_ops import conv2d_same, conv_transpose_2x2, depthwise_conv2d_same
from .tensor import Param, ShapeError, Tensor


class Module:
    """Minimal layer base: parameter discovery by attribute walk.

    Attribute insertion order is the registry order, so names are stable
    across runs for a fixed architecture.
    """

    def named_params(self, prefix: str = ""):
        for key, val in self.__dict__.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Param):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_params(path)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Param, Module)):
                        sub = f"{path}.{i}"
                        if isinstance(item, Param):
                            yield sub, item
                        else:
                            yield from item.named_params(sub)

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def cast(self, dtype) -> "Module":
        """Convert all parameters in place (float64 for gradient checks)."""
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class DWSConv(Module):
    """Depthwise 3x3 then pointwise 1x1 projection, stride 1, same padding.

    Activation and normalization are composed by the caller.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 k: int = 3, dtype=np.float32):
        self.depthwise = Param(kaiming_uniform(rng, (c_in, 1, k, k), c_in * k * k, dtype))
        self.pointwise = Param(kaiming_uniform(rng, (c_out, c_in, 1, 1), c_in, dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        y = depthwise_conv2d_same(x, self.depthwise)
        y = conv2d_same(y, self.pointwise)
        return y + self.bias.reshape(1, -1, 1, 1)


class BatchNorm(Module):
    """Per-channel batch normalization over (N, H, W) of an NCHW map."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        n, c, h, w = x.shape
        gamma = self.gamma.reshape(1, -1, 1, 1)
        beta = self.beta.reshape(1, -1, 1, 1)
        if training:
            if n * h * w < 2:
                raise ShapeError(f"batch norm needs N*H*W >= 2 in training, got {x.shape}")
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data.reshape(-1)).astype(self.running_var.dtype)
            return centered / T.sqrt(var + self.eps) * gamma + beta
        rm = self.running_mean.reshape(1, -1, 1, 1)
        rv = self.running_var.reshape(1, -1, 1, 1)
        return (x - rm) / np.sqrt(rv + self.eps) * gamma + beta


class LayerNormChannels(Module):
    """Layer norm over the channel axis of an NCHW map, per spatial position."""

    def __init__(self, c: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        normed = centered / T.sqrt(var + self.eps)
        return normed * self.gamma.reshape(1, -1, 1, 1) + self.beta.reshape(1, -1, 1, 1)


class TransposedConv(Module):
    """2x2 stride-2 transposed convolution: exact 2x spatial upsample."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.kernel = Param(kaiming_uniform(rng, (c_in, c_out, 2, 2), c_in * 4, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose_2x2(x, self.kernel)
