"""Dense tensor value of the engine: a numpy buffer, a grad slot and a tape link."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Any, Iterator, Sequence

import numpy as np

from drebnet.core.config import DEFAULT_DTYPE
from drebnet.core.errors import InvariantViolation
from drebnet.engine.tape import Node

DTYPES = {'f32': np.float32, 'f64': np.float64}
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

_default = {'dtype': np.dtype(DTYPES[DEFAULT_DTYPE])}


def resolve_dtype(dtype: Any = None) -> np.dtype:
    if dtype is None:
        return _default['dtype']
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise InvariantViolation(f'unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}')
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in DTYPE_CODES:
        raise InvariantViolation(f'unsupported element type {resolved}')
    return resolved


def get_default_dtype() -> np.dtype:
    return _default['dtype']


@contextmanager
def default_dtype(dtype: Any) -> Iterator[np.dtype]:
    previous = _default['dtype']
    _default['dtype'] = resolve_dtype(dtype)
    try:
        yield _default['dtype']
    finally:
        _default['dtype'] = previous


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'node', 'name')

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str | None = None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in DTYPE_CODES:
            array = data
        else:
            array = np.asarray(data, dtype=resolve_dtype(dtype))
        if array.ndim == 0:
            array = array.reshape(1)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise InvariantViolation(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise InvariantViolation(f'gradient shape {grad.shape} does not match tensor shape {self.shape}')
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f' name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})'

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: Any) -> 'Tensor':
        return F.add(self, other)

    def __radd__(self, other: Any) -> 'Tensor':
        return F.add(other, self)

    def __sub__(self, other: Any) -> 'Tensor':
        return F.sub(self, other)

    def __rsub__(self, other: Any) -> 'Tensor':
        return F.sub(other, self)

    def __mul__(self, other: Any) -> 'Tensor':
        return F.mul(self, other)

    def __rmul__(self, other: Any) -> 'Tensor':
        return F.mul(other, self)

    def __truediv__(self, other: Any) -> 'Tensor':
        return F.div(self, other)

    def __rtruediv__(self, other: Any) -> 'Tensor':
        return F.div(other, self)

    def __neg__(self) -> 'Tensor':
        return F.neg(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        return F.pow_scalar(self, exponent)

    def __getitem__(self, key: Any) -> 'Tensor':
        return F.index(self, key)

    def sum(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> 'Tensor':
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> 'Tensor':
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def parameter(data: Any, dtype: Any = None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=resolve_dtype(dtype), copy=True), requires_grad=True, name=name)


from drebnet.engine import functional as F  # noqa: E402
from drebnet.engine.tape import backward  # noqa: E402
