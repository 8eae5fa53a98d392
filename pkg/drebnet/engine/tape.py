"""Append-only operation tape for reverse-mode differentiation.

Every differentiable primitive records one ``Node`` on the tape that is active
for the current thread. ``backward`` walks the nodes in strict reverse append
order, so a node's inputs always precede it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterator, Sequence

import numpy as np

from drebnet.core.errors import TapeError

if TYPE_CHECKING:
    from drebnet.engine.tensor import Tensor

VjpFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Node:
    op: str
    index: int
    inputs: tuple['Tensor', ...]
    vjp: VjpFn
    tape: 'Tape'


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def append(self, op: str, inputs: tuple['Tensor', ...], vjp: VjpFn) -> Node:
        if self.consumed:
            raise TapeError('tape already consumed by backward; start a new pass')
        node = Node(op=op, index=len(self.nodes), inputs=inputs, vjp=vjp, tape=self)
        self.nodes.append(node)
        return node

    def release(self) -> None:
        self.nodes = []
        self.consumed = True

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class CostMeter:
    """Accumulates multiply-accumulate and bias-add counts of layer ops."""

    macs: int = 0
    adds: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, macs: int, adds: int) -> None:
        self.macs += macs
        self.adds += adds
        self.by_op[op] = self.by_op.get(op, 0) + macs + adds

    @property
    def flops(self) -> int:
        return self.macs + self.adds


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True
        self.meters: list[CostMeter] = []


_state = _State()


def current_tape() -> Tape:
    if _state.tape.consumed:
        _state.tape = Tape()
    return _state.tape


def reset_tape() -> Tape:
    _state.tape = Tape()
    return _state.tape


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def count_costs() -> Iterator[CostMeter]:
    meter = CostMeter()
    _state.meters.append(meter)
    try:
        yield meter
    finally:
        _state.meters.remove(meter)


def charge(op: str, macs: int = 0, adds: int = 0) -> None:
    for meter in _state.meters:
        meter.add(op, macs, adds)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: 'Tensor') -> None:
    """Fill the ``grad`` slot of every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise TapeError(f'backward needs a scalar loss, got shape {loss.shape}')

    seed = np.ones_like(loss.data)
    node = loss.node
    if node is None:
        if loss.requires_grad:
            loss.accumulate_grad(seed)
        return

    tape = node.tape
    if tape.consumed:
        raise TapeError('backward called twice on the same tape without a new forward pass')

    pending: dict[int, np.ndarray] = {node.index: seed}
    for current in reversed(tape.nodes[:node.index + 1]):
        grad = pending.pop(current.index, None)
        if grad is None:
            continue
        input_grads = current.vjp(grad)
        for tensor, input_grad in zip(current.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            input_grad = unbroadcast(np.asarray(input_grad, dtype=tensor.data.dtype), tensor.shape)
            if tensor.node is not None and tensor.node.tape is tape:
                index = tensor.node.index
                pending[index] = pending[index] + input_grad if index in pending else input_grad
            else:
                tensor.accumulate_grad(input_grad)

    tape.release()
