"""Differentiable primitives.

Every op computes its forward value with numpy, charges its layer cost to any
active ``CostMeter`` and, when gradients are enabled and an input requires
them, appends a node holding the vector-Jacobian product to the active tape.
Feature maps are NCHW batches throughout.
"""
from __future__ import annotations

import logging
from typing import Any, Sequence

import numpy as np

from drebnet.core import config
from drebnet.core.errors import InvariantViolation, NonFiniteError, ShapeMismatchError
from drebnet.engine.tape import VjpFn, charge, current_tape, grad_enabled
from drebnet.engine.tensor import Tensor

logger = logging.getLogger(__name__)

Axis = int | Sequence[int] | None


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value, requires_grad=False)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp: VjpFn) -> Tensor:
    result = Tensor(out)
    if config.DEBUG_CHECKS and not np.all(np.isfinite(result.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f'{op} produced non-finite values from finite inputs')
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = current_tape().append(op, inputs, vjp)
    return result


def _binary_operands(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------- elementwise

def add(a: Any, b: Any) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record('add', (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Any, b: Any) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record('sub', (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Any, b: Any) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record('mul', (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def div(a: Any, b: Any) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _record('div', (a, b), out, lambda g: (g / b.data, -g * out / b.data))


def neg(x: Tensor) -> Tensor:
    return _record('neg', (x,), -x.data, lambda g: (-g,))


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return _record('pow', (x,), out, lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record('exp', (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record('log', (x,), np.log(x.data), lambda g: (g / x.data,))


def cos(x: Tensor) -> Tensor:
    return _record('cos', (x,), np.cos(x.data), lambda g: (-g * np.sin(x.data),))


def sin(x: Tensor) -> Tensor:
    return _record('sin', (x,), np.sin(x.data), lambda g: (g * np.cos(x.data),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _record('abs', (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return _record('clamp', (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _record('relu', (x,), np.where(active, x.data, 0).astype(x.dtype), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    data = x.data
    positive = data >= 0
    exp_neg = np.exp(-np.abs(data))
    out = np.where(positive, 1.0 / (1.0 + exp_neg), exp_neg / (1.0 + exp_neg)).astype(x.dtype)
    info = np.finfo(x.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)
    return _record('sigmoid', (x,), out, lambda g: (g * out * (1.0 - out),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == 'relu':
        return relu(x)
    if kind == 'sigmoid':
        return sigmoid(x)
    raise InvariantViolation(f'unknown pointwise kind {kind!r}')


def lerp(start: Tensor, end: Tensor, weight: Tensor) -> Tensor:
    """``weight * end + (1 - weight) * start`` written so that equal operands return ``start`` bit-exactly."""
    return add(start, mul(weight, sub(end, start)))


# ---------------------------------------------------------------- reductions and shape

def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        kept = [1 if i in axes else s for i, s in enumerate(x.shape)]
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return _record('sum', (x,), out, vjp)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _record('reshape', (x,), out, lambda g: (g.reshape(x.shape),))


def _is_basic_key(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def index(x: Tensor, key: Any) -> Tensor:
    out = np.array(x.data[key], copy=True)
    basic = _is_basic_key(key)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g.reshape(out.shape)
        else:
            np.add.at(full, key, g.reshape(out.shape))
        return (full,)

    return _record('index', (x,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return _record('concat', tensors, out, vjp)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record('stack', tensors, out, lambda g: [np.take(g, i, axis=axis) for i in range(len(tensors))])


# ---------------------------------------------------------------- layers

def _require_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f'{op} expects an NCHW tensor, got shape {x.shape}')


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require_nchw(x, 'conv2d')
    if weight.ndim != 4:
        raise ShapeMismatchError(f'conv2d weight must be [C_out, C_in, k, k], got {weight.shape}')
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeMismatchError(f'conv2d input has {c} channels but weight expects {c_in}')
    if kh < 1 or kw < 1 or stride < 1:
        raise InvariantViolation(f'conv2d needs k >= 1 and stride >= 1, got k={kh}x{kw} stride={stride}')
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatchError(f'conv2d bias must have shape ({c_out},), got {bias.shape}')
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatchError(f'conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})')
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # channel-major so every kernel tap is one GEMM over contiguous rows
    padded_t = np.ascontiguousarray(padded.transpose(1, 0, 2, 3))
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def tap(i: int, j: int) -> tuple[slice, slice]:
        return slice(i, i + stride * (h_out - 1) + 1, stride), slice(j, j + stride * (w_out - 1) + 1, stride)

    patches = [padded_t[(slice(None), slice(None)) + tap(i, j)].reshape(c, -1) for i, j in taps]
    wdata = weight.data
    out_t = np.zeros((c_out, n * h_out * w_out), dtype=np.result_type(x.dtype, weight.dtype))
    for (i, j), patch in zip(taps, patches):
        out_t += wdata[:, :, i, j] @ patch
    out = out_t.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    charge('conv2d', macs=n * c_out * h_out * w_out * c * kh * kw,
           adds=n * c_out * h_out * w_out if bias is not None else 0)

    def vjp(g: np.ndarray) -> list[np.ndarray | None]:
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        grad_w = np.empty_like(wdata)
        grad_padded = np.zeros_like(padded_t)
        for (i, j), patch in zip(taps, patches):
            grad_w[:, :, i, j] = g_t @ patch.T
            grad_padded[(slice(None), slice(None)) + tap(i, j)] += \
                (wdata[:, :, i, j].T @ g_t).reshape(c, n, h_out, w_out)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        grads: list[np.ndarray | None] = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record('conv2d', inputs, out, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is laid out [C_in, C_out, k, k] (the adjoint of conv2d)."""
    _require_nchw(x, 'conv_transpose2d')
    if weight.ndim != 4:
        raise ShapeMismatchError(f'conv_transpose2d weight must be [C_in, C_out, k, k], got {weight.shape}')
    n, c, h, w = x.shape
    c_in, c_out, kh, kw = weight.shape
    if c_in != c:
        raise ShapeMismatchError(f'conv_transpose2d input has {c} channels but weight expects {c_in}')
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatchError(f'conv_transpose2d bias must have shape ({c_out},), got {bias.shape}')
    full_h = (h - 1) * stride + kh
    full_w = (w - 1) * stride + kw
    h_out = full_h - 2 * padding
    w_out = full_w - 2 * padding
    if h_out < 1 or w_out < 1:
        raise ShapeMismatchError(f'conv_transpose2d output would be empty for input {h}x{w}')

    x_mat = x.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    wmat = weight.data.reshape(c_in, -1)
    cols = (x_mat @ wmat).reshape(n, h, w, c_out, kh, kw)
    full = np.zeros((n, c_out, full_h, full_w), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + h_out, padding:padding + w_out]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    charge('conv_transpose2d', macs=n * c_in * c_out * kh * kw * h * w,
           adds=n * c_out * h_out * w_out if bias is not None else 0)

    def vjp(g: np.ndarray) -> list[np.ndarray | None]:
        grad_full = np.zeros((n, c_out, full_h, full_w), dtype=g.dtype)
        grad_full[:, :, padding:padding + h_out, padding:padding + w_out] = g
        grad_cols = np.empty((n, h, w, c_out, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_cols[:, :, :, :, i, j] = \
                    grad_full[:, :, i:i + stride * h:stride, j:j + stride * w:stride].transpose(0, 2, 3, 1)
        grad_cols = grad_cols.reshape(-1, c_out * kh * kw)
        grad_x = (grad_cols @ wmat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        grad_w = (x_mat.T @ grad_cols).reshape(weight.shape)
        grads: list[np.ndarray | None] = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record('conv_transpose2d', inputs, out, vjp)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place with ``momentum`` (unbiased variance). In eval
    mode the running buffers are used.
    """
    _require_nchw(x, 'batch_norm')
    if eps <= 0:
        raise InvariantViolation(f'batch_norm eps must be positive, got {eps}')
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(f'batch_norm affine params must have shape ({c},)')
    if running_mean is None or running_var is None or running_mean.shape != (c,) or running_var.shape != (c,):
        raise InvariantViolation('batch_norm running statistics are not populated for this channel count')
    axes = (0, 2, 3)
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]

    if training:
        count = n * h * w
        if count < 2:
            raise InvariantViolation(f'batch_norm in train mode needs N*H*W >= 2 per channel, got {count}')
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered ** 2).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = centered * inv_std
        out = g_ * x_hat + b_
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * count / (count - 1)

        def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            grad_hat = g * g_
            grad_x = inv_std / count * (
                count * grad_hat
                - grad_hat.sum(axis=axes, keepdims=True)
                - x_hat * (grad_hat * x_hat).sum(axis=axes, keepdims=True)
            )
            return grad_x, (g * x_hat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)[None, :, None, None]
        x_hat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv_std
        out = g_ * x_hat + b_

        def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            return g * g_ * inv_std, (g * x_hat).sum(axis=axes), g.sum(axis=axes)

    return _record('batch_norm', (x, gamma, beta), out.astype(x.dtype, copy=False), vjp)


def adaptive_avg_pool(x: Tensor, out_hw: tuple[int, int] = (1, 1)) -> Tensor:
    _require_nchw(x, 'adaptive_avg_pool')
    if tuple(out_hw) != (1, 1):
        raise InvariantViolation(f'adaptive_avg_pool supports global (1, 1) output only, got {out_hw}')
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return _record('adaptive_avg_pool', (x,), out,
                   lambda g: (np.broadcast_to(g * scale, x.shape).astype(x.dtype),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_nchw(x, 'upsample_nearest2x')
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _record('upsample_nearest2x', (x,), out,
                   lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def upsample2x(x: Tensor, mode: str = 'nearest', weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    if mode == 'nearest':
        return upsample_nearest2x(x)
    if mode == 'transposed_conv':
        if weight is None or weight.ndim != 4 or weight.shape[2:] != (4, 4):
            raise ShapeMismatchError('transposed_conv upsampling needs a [C_in, C_out, 4, 4] weight')
        return conv_transpose2d(x, weight, bias, stride=2, padding=1)
    raise InvariantViolation(f'unknown upsample mode {mode!r}')
