"""Parameter containers: a small module tree with named parameters and buffers."""
from __future__ import annotations

import math
from typing import Any, Iterator

import numpy as np

from drebnet.engine import functional as F
from drebnet.engine.tensor import Tensor, parameter, resolve_dtype


class Module:
    training: bool = True

    def named_children(self) -> Iterator[tuple[str, 'Module']]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f'{name}.{i}', item

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f'{prefix}{name}', value
        for name, child in self.named_children():
            yield from child.named_parameters(f'{prefix}{name}.')

    def named_buffers(self, prefix: str = '') -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, '_buffers', ()):
            yield f'{prefix}{name}', getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f'{prefix}{name}.')

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters and buffers; return the names left unset."""
        own = self.state_dict()
        unexpected = sorted(set(state) - set(own))
        if strict and unexpected:
            raise KeyError(f'unexpected state entries: {unexpected[:5]}')
        missing = []
        for name, current in own.items():
            if name not in state:
                missing.append(name)
                continue
            value = np.asarray(state[name])
            if value.shape != current.shape:
                raise ValueError(f'shape mismatch for {name}: {value.shape} vs {current.shape}')
            current[...] = value
        if strict and missing:
            raise KeyError(f'missing state entries: {missing[:5]}')
        return missing

    def train(self, mode: bool = True) -> 'Module':
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], bound: float, dtype: np.dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True, dtype: Any = None):
        dtype = resolve_dtype(dtype)
        fan_in = in_channels * kernel_size * kernel_size
        bound = math.sqrt(6.0 / fan_in)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = parameter(_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), bound, dtype))
        self.bias = parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 4, stride: int = 2, padding: int = 1, dtype: Any = None):
        dtype = resolve_dtype(dtype)
        bound = math.sqrt(6.0 / (in_channels * kernel_size * kernel_size / (stride * stride)))
        self.stride = stride
        self.padding = padding
        self.weight = parameter(_uniform(rng, (in_channels, out_channels, kernel_size, kernel_size), bound, dtype))
        self.bias = parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    _buffers = ('running_mean', 'running_var')

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype: Any = None):
        dtype = resolve_dtype(dtype)
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)
