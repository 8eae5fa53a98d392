"""Finite-difference gradient checks over the differentiable surface, run in f64."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable, Literal, Mapping

import numpy as np

from drebnet.core.errors import UsageError
from drebnet.engine import functional as F
from drebnet.engine.gradcheck import grad_check
from drebnet.engine.module import BatchNorm2d
from drebnet.engine.spectral import irfft2, rfft2
from drebnet.engine.tensor import Tensor, default_dtype, parameter
from drebnet.models.fusion import LfammFilter, MagffParams, magff_fuse, lfamm_apply
from drebnet.services.losses import focal_loss, mse_loss, offset_loss, ssim_loss, wh_loss

logger = logging.getLogger(__name__)

Suite = Literal['all', 'primitives', 'magff', 'lfamm', 'losses']
SUITES = ('primitives', 'magff', 'lfamm', 'losses')
PASS_THRESHOLD = 1e-4
SAMPLES = 20
STEP = 1e-5
# denominator floor for f64 central differences at STEP: gradients smaller than
# this are compared in absolute terms, since their difference quotient is round-off
ROUNDOFF_FLOOR = 1e-5
# conv biases feeding batch norm are cancelled by the mean subtraction
_DEAD_BIAS = re.compile(r'\.conv\d\.bias$')

Case = Callable[[np.random.Generator], tuple[Callable[[Mapping[str, Tensor]], Tensor], dict[str, Tensor]]]


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < PASS_THRESHOLD


def _param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return parameter(rng.standard_normal(shape) * scale, dtype='f64')


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, proj))


def _conv2d(rng):
    params = {'x': _param(rng, 2, 3, 6, 6), 'w': _param(rng, 4, 3, 3, 3), 'b': _param(rng, 4)}
    proj = rng.standard_normal((2, 4, 3, 3))
    return lambda p: _projected(F.conv2d(p['x'], p['w'], p['b'], stride=2, padding=1), proj), params


def _conv_transpose2d(rng):
    params = {'x': _param(rng, 2, 3, 4, 4), 'w': _param(rng, 3, 2, 4, 4), 'b': _param(rng, 2)}
    proj = rng.standard_normal((2, 2, 8, 8))
    return lambda p: _projected(F.conv_transpose2d(p['x'], p['w'], p['b']), proj), params


def _batch_norm(rng):
    bn = BatchNorm2d(3, dtype='f64')
    params = {'x': _param(rng, 2, 3, 4, 4), 'gamma': bn.gamma, 'beta': bn.beta}
    proj = rng.standard_normal((2, 3, 4, 4))

    def build(p):
        return _projected(F.batch_norm(p['x'], p['gamma'], p['beta'], bn.running_mean, bn.running_var,
                                       training=True), proj)

    return build, params


def _pointwise(rng):
    params = {'x': _param(rng, 2, 3, 4, 4)}
    proj = rng.standard_normal((2, 3, 8, 8))

    def build(p):
        x = F.add(F.sigmoid(p['x']), F.relu(p['x']))
        x = F.add(x, F.adaptive_avg_pool(p['x']))
        return _projected(F.upsample2x(x), proj)

    return build, params


def _spectrum(rng):
    params = {'x': _param(rng, 1, 2, 6, 7)}
    proj_amp = rng.standard_normal((1, 2, 6, 4))
    proj_out = rng.standard_normal((1, 2, 6, 7))

    def build(p):
        spectrum = rfft2(p['x'])
        return F.add(_projected(spectrum.abs(), proj_amp), _projected(irfft2(spectrum, 7), proj_out))

    return build, params


def _magff(rng):
    fusion = MagffParams(8, rng, reduction=4, dtype='f64')
    params = {name: p for name, p in fusion.named_parameters() if not _DEAD_BIAS.search(name)}
    params.update(x1=_param(rng, 4, 8, 4, 4), x2=_param(rng, 4, 8, 4, 4))
    proj = rng.standard_normal((4, 8, 4, 4))
    return lambda p: _projected(magff_fuse(p['x1'], p['x2'], fusion), proj), params


def _lfamm(rng):
    f = LfammFilter(3, 8, 8, dtype='f64')
    f.weights.data[...] = rng.uniform(0.5, 1.5, size=f.weights.shape)
    params = {'weights': f.weights, 'x': _param(rng, 2, 3, 8, 8)}
    proj = rng.standard_normal((2, 3, 8, 8))
    return lambda p: _projected(lfamm_apply(p['x'], f), proj), params


def _focal(rng):
    hm_t = rng.uniform(0.0, 0.9, size=(2, 2, 6, 6))
    hm_t[0, 1, 2, 3] = hm_t[1, 0, 4, 1] = 1.0
    params = {'logits': _param(rng, 2, 2, 6, 6)}
    return lambda p: focal_loss(F.sigmoid(p['logits']), hm_t), params


def _box_losses(rng):
    mask = rng.uniform(size=(2, 6, 6)) < 0.3
    wh_t = rng.uniform(1.0, 5.0, size=(2, 2, 6, 6))
    reg_t = rng.uniform(size=(2, 2, 6, 6))
    params = {'wh': _param(rng, 2, 2, 6, 6, scale=3.0), 'reg': _param(rng, 2, 2, 6, 6)}
    return lambda p: F.add(wh_loss(p['wh'], wh_t, mask), offset_loss(p['reg'], reg_t, mask)), params


def _restoration(rng):
    sharp = rng.uniform(size=(2, 3, 16, 16))
    params = {'restored': parameter(rng.uniform(0.05, 0.95, size=(2, 3, 16, 16)), dtype='f64')}
    return lambda p: F.add(mse_loss(p['restored'], sharp), ssim_loss(p['restored'], sharp)), params


CASES: dict[str, dict[str, Case]] = {
    'primitives': {'conv2d': _conv2d, 'conv_transpose2d': _conv_transpose2d, 'batch_norm': _batch_norm,
                   'pointwise': _pointwise, 'spectrum': _spectrum},
    'magff': {'magff_fuse': _magff},
    'lfamm': {'lfamm_apply': _lfamm},
    'losses': {'focal': _focal, 'wh+offset': _box_losses, 'mse+ssim': _restoration},
}


def run_gradcheck(suite: Suite = 'all', seed: int = 0, samples: int = SAMPLES) -> list[CheckResult]:
    if suite != 'all' and suite not in CASES:
        raise UsageError(f'unknown gradcheck module {suite!r}; choose all, {", ".join(SUITES)}')
    selected = SUITES if suite == 'all' else (suite,)
    results = []
    with default_dtype('f64'):
        for name in selected:
            for case_name, case in CASES[name].items():
                rng = np.random.default_rng([seed, len(results)])
                build, params = case(rng)
                error = grad_check(build, params, eps=STEP, floor=ROUNDOFF_FLOOR, sample=samples, seed=seed)
                results.append(CheckResult(name=f'{name}/{case_name}', error=error))
                logger.info('gradcheck %s/%s: max relative error %.3e', name, case_name, error)
    return results
