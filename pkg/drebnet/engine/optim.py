from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np

from drebnet.core.errors import InvariantViolation, MissingGradientError
from drebnet.engine.tensor import Tensor

Rule = Literal['adam', 'sgd']
Schedule = Literal['constant', 'linear']


@dataclass
class OptimState:
    learning_rate: float
    schedule: Schedule = 'linear'
    total_steps: int = 1
    rule: Rule = 'adam'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise InvariantViolation(f'learning rate must be >= 0, got {self.learning_rate}')
        if self.schedule == 'linear' and self.total_steps < 1:
            raise InvariantViolation('linear schedule needs total_steps >= 1')

    def effective_lr(self, step: int | None = None) -> float:
        t = self.step if step is None else step
        if self.schedule == 'constant':
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - t / self.total_steps)


def optimizer_step(params: Mapping[str, Tensor], state: OptimState) -> float:
    """Apply one update to every parameter, zero the gradients, return the rate used."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f'no gradient for parameters: {", ".join(missing[:5])}'
                                   + (' ...' if len(missing) > 5 else ''))

    lr = state.effective_lr()
    state.step += 1
    for name, p in params.items():
        grad = p.grad
        if state.rule == 'sgd':
            update = grad
        else:
            m = state.first_moment.get(name)
            v = state.second_moment.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = state.beta1 * m + (1.0 - state.beta1) * grad
            v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
            state.first_moment[name] = m.astype(p.dtype, copy=False)
            state.second_moment[name] = v.astype(p.dtype, copy=False)
            m_hat = m / (1.0 - state.beta1 ** state.step)
            v_hat = v / (1.0 - state.beta2 ** state.step)
            update = m_hat / (np.sqrt(v_hat) + state.eps)
        if lr > 0:
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)
        p.grad = None
    return lr
