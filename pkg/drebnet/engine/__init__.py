from drebnet.engine.functional import (
    adaptive_avg_pool,
    batch_norm,
    conv2d,
    conv_transpose2d,
    pointwise,
    relu,
    sigmoid,
    upsample2x,
)
from drebnet.engine.gradcheck import grad_check
from drebnet.engine.optim import OptimState, optimizer_step
from drebnet.engine.spectral import ComplexGrid, irfft2, rfft2
from drebnet.engine.tape import Tape, backward, count_costs, no_grad, reset_tape
from drebnet.engine.tensor import Tensor, default_dtype, parameter

__all__ = [
    'ComplexGrid',
    'OptimState',
    'Tape',
    'Tensor',
    'adaptive_avg_pool',
    'backward',
    'batch_norm',
    'conv2d',
    'conv_transpose2d',
    'count_costs',
    'default_dtype',
    'grad_check',
    'irfft2',
    'no_grad',
    'optimizer_step',
    'parameter',
    'pointwise',
    'relu',
    'reset_tape',
    'rfft2',
    'sigmoid',
    'upsample2x',
]
