import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from drebnet.engine.tape import count_costs, no_grad
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import DrebNet, Phase, forward_infer, forward_train

logger = logging.getLogger(__name__)

Mode = Literal['train', 'infer']


@dataclass
class CostReport:
    flops: int
    macs: int
    params_val: int
    params_total: int
    by_op: dict[str, int]

    def as_row(self) -> str:
        return (f'flops={self.flops} macs={self.macs} '
                f'params(val/total)={self.params_val}/{self.params_total} '
                f'({self.params_val * 4 / 2 ** 20:.3f}/{self.params_total * 4 / 2 ** 20:.3f} MB)')


def measure(model: DrebNet, mode: Mode) -> CostReport:
    """Trace one single-image forward pass and count conv-family multiply-adds plus bias adds.

    Elementwise ops, normalization and FFTs are not charged. BN runs on running
    statistics so the trace leaves every buffer untouched.
    """
    was_training = model.training
    model.eval()
    h, w = model.cfg.input_hw
    x = Tensor(np.zeros((1, model.cfg.in_channels, h, w), dtype=model.dtype))
    try:
        with no_grad(), count_costs() as meter:
            if mode == 'train':
                forward_train(x, model, Phase.JOINT)
            else:
                forward_infer(x, model)
    finally:
        model.train(was_training)
    return CostReport(flops=meter.flops, macs=meter.macs, params_val=model.num_parameters('infer'),
                      params_total=model.num_parameters('train'), by_op=dict(meter.by_op))


def count_flops_params(model: DrebNet, mode: Mode) -> tuple[int, int]:
    report = measure(model, mode)
    params = report.params_total if mode == 'train' else report.params_val
    logger.debug('Cost of %s graph: %s', mode, report.as_row())
    return report.flops, params
