"""Convolutional building blocks shared by the detection and restoration branches."""
from __future__ import annotations

from typing import Any

import numpy as np

from drebnet.engine import functional as F
from drebnet.engine.module import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from drebnet.engine.tensor import Tensor

HM_BIAS_INIT = -2.19


class ConvBnRelu(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3, stride: int = 1, dtype: Any = None):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class SqueezeExcitation(Module):
    """Channel reweighting: global pool, bottleneck 1x1 convs, sigmoid gate."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype: Any = None):
        hidden = max(channels // reduction, 1)
        self.fc1 = Conv2d(channels, hidden, 1, rng, padding=0, dtype=dtype)
        self.fc2 = Conv2d(hidden, channels, 1, rng, padding=0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        gate = F.sigmoid(self.fc2(F.relu(self.fc1(F.adaptive_avg_pool(x)))))
        return F.mul(x, gate)


class DoubleConv(Module):
    """conv3x3-BN-ReLU twice; the first conv carries the stride. Optional SE after the pair."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 stride: int = 1, use_se: bool = False, dtype: Any = None):
        self.first = ConvBnRelu(in_channels, out_channels, rng, stride=stride, dtype=dtype)
        self.second = ConvBnRelu(out_channels, out_channels, rng, dtype=dtype)
        self.se = SqueezeExcitation(out_channels, rng, dtype=dtype) if use_se else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.second(self.first(x))
        if self.se is not None:
            x = self.se(x)
        return x


class DeconvBnRelu(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype: Any = None):
        self.deconv = ConvTranspose2d(in_channels, out_channels, rng, kernel_size=4, stride=2, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.deconv(x)))


class Head(Module):
    def __init__(self, in_channels: int, hidden: int, out_channels: int, rng: np.random.Generator,
                 bias_init: float = 0.0, dtype: Any = None):
        self.conv = Conv2d(in_channels, hidden, 3, rng, dtype=dtype)
        self.out = Conv2d(hidden, out_channels, 1, rng, padding=0, dtype=dtype)
        if bias_init:
            self.out.bias.data[...] = bias_init

    def forward(self, x: Tensor) -> Tensor:
        return self.out(F.relu(self.conv(x)))


class UpBlock(Module):
    """Nearest 2x upsample and conv3x3, then skip concatenation aggregated by a 1x1 conv."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, rng: np.random.Generator,
                 dtype: Any = None):
        self.up = ConvBnRelu(in_channels, out_channels, rng, dtype=dtype)
        self.aggregate = ConvBnRelu(out_channels + skip_channels, out_channels, rng, kernel_size=1, dtype=dtype)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = self.up(F.upsample2x(x, mode='nearest'))
        return self.aggregate(F.concat([x, skip], axis=1))


def stage_channels(base: int, level: int) -> int:
    """Channel width at stride 2**level, doubling from ``base`` and capped at 8 * base."""
    return min(base * 2 ** level, 8 * base)
