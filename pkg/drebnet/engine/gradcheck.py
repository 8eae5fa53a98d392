from __future__ import annotations

import logging
from typing import Callable, Mapping

import numpy as np

from drebnet.core.errors import InvariantViolation, NonFiniteError
from drebnet.engine.tape import backward, no_grad, reset_tape
from drebnet.engine.tensor import Tensor

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Mapping[str, Tensor]], Tensor]


def _evaluate(build_scalar: ScalarFn, params: Mapping[str, Tensor]) -> float:
    with no_grad():
        value = build_scalar(params).item()
    if not np.isfinite(value):
        raise NonFiniteError(f'loss is not finite during gradient check: {value}')
    return value


def grad_check(build_scalar: ScalarFn, params: Mapping[str, Tensor], eps: float = 1e-6,
               floor: float = 1e-12, sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error of one element is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``sample`` limits the number of sampled elements per parameter.
    """
    if eps <= 0:
        raise InvariantViolation(f'eps must be positive, got {eps}')
    for name, p in params.items():
        if p.dtype != np.float64:
            raise InvariantViolation(f'gradient check runs in f64; parameter {name} is {p.dtype}')

    for p in params.values():
        p.zero_grad()
    reset_tape()
    loss = build_scalar(params)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError('loss is not finite during gradient check')
    backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        positions = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            positions = np.sort(rng.choice(flat.size, size=sample, replace=False))
        for pos in positions:
            original = flat[pos]
            flat[pos] = original + eps
            plus = _evaluate(build_scalar, params)
            flat[pos] = original - eps
            minus = _evaluate(build_scalar, params)
            flat[pos] = original
            numeric = (plus - minus) / (2 * eps)
            exact = analytic[name].reshape(-1)[pos]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if error > worst:
                worst = error
                logger.debug('grad_check worst so far: %s[%d] analytic=%.3e numeric=%.3e', name, pos, exact, numeric)
        p.zero_grad()
    return float(worst)
