"""Neural-network layers built on the autodiff engine.

Each layer owns its parameters as Tensors and exposes them through
``trainables()`` (gradient-carrying tensors) and ``state_arrays()``
(every persistent array in declaration order, including batchnorm
running statistics, for checkpointing).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Layer:
    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def trainables(self) -> list[Tensor]:
        return []

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return []


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Layer):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def trainables(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def state_arrays(self):
        out = [("conv.weight", self.weight.data)]
        if self.bias is not None:
            out.append(("conv.bias", self.bias.data))
        return out


class DepthwiseConv2d(Layer):
    def __init__(self, rng: np.random.Generator, channels: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Tensor(he_normal(rng, (channels, kernel, kernel), kernel * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def trainables(self):
        return [self.weight, self.bias]

    def state_arrays(self):
        return [("dwconv.weight", self.weight.data), ("dwconv.bias", self.bias.data)]


class Dense(Layer):
    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int):
        self.weight = Tensor(he_normal(rng, (in_features, out_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return (x @ self.weight) + self.bias

    def trainables(self):
        return [self.weight, self.bias]

    def state_arrays(self):
        return [("dense.weight", self.weight.data), ("dense.bias", self.bias.data)]


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=training, momentum=self.momentum, eps=self.eps)

    def trainables(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [
            ("bn.gamma", self.gamma.data),
            ("bn.beta", self.beta.data),
            ("bn.running_mean", self.running_mean),
            ("bn.running_var", self.running_var),
        ]


class ReLU(Layer):
    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return ad.relu(x)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer(x, training=training)
        return x

    def trainables(self):
        return [p for layer in self.layers for p in layer.trainables()]

    def state_arrays(self):
        return [(f"{i}.{name}", arr) for i, layer in enumerate(self.layers)
                for name, arr in layer.state_arrays()]


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus a skip connection, relu after the sum.

    When channel count or stride changes, the skip path is a strided 1x1
    convolution with its own batchnorm.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, stride: int = 1):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, bias=False)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, bias=False)
        self.bn2 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj_conv = Conv2d(rng, in_ch, out_ch, 1, stride=stride, padding=0, bias=False)
            self.proj_bn = BatchNorm(out_ch)
        else:
            self.proj_conv = None
            self.proj_bn = None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        out = self.bn2(self.conv2(ad.relu(self.bn1(self.conv1(x), training)), ), training)
        skip = x if self.proj_conv is None else self.proj_bn(self.proj_conv(x), training)
        return ad.relu(out + skip)

    def trainables(self):
        parts = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj_conv is not None:
            parts += [self.proj_conv, self.proj_bn]
        return [p for part in parts for p in part.trainables()]

    def state_arrays(self):
        named = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj_conv is not None:
            named += [("proj_conv", self.proj_conv), ("proj_bn", self.proj_bn)]
        return [(f"{prefix}.{name}", arr) for prefix, part in named
                for name, arr in part.state_arrays()]
