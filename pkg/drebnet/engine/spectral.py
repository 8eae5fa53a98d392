"""Half-spectrum 2-D Fourier transforms with exact adjoints, plus polar helpers.

Transforms run on the last two axes through ``numpy.fft`` (pocketfft: mixed
radix with a Bluestein path for large prime factors, so any H and W work).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drebnet.core.errors import ShapeMismatchError
from drebnet.engine.functional import _record, index, stack
from drebnet.engine.tensor import Tensor


@dataclass
class ComplexGrid:
    """Half spectrum of a real signal: ``real`` and ``imag`` share shape [..., H, W//2 + 1]."""

    real: Tensor
    imag: Tensor

    def __post_init__(self) -> None:
        if self.real.shape != self.imag.shape:
            raise ShapeMismatchError(f'complex grid parts differ: {self.real.shape} vs {self.imag.shape}')

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def to_numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    def abs(self) -> Tensor:
        return complex_abs(self.real, self.imag)

    def angle(self) -> Tensor:
        return complex_angle(self.real, self.imag)


def _half_width(w: int) -> int:
    return w // 2 + 1


def rfft2(x: Tensor) -> ComplexGrid:
    if x.ndim < 2:
        raise ShapeMismatchError(f'rfft2 needs at least two axes, got shape {x.shape}')
    h, w = x.shape[-2:]
    spectrum = np.fft.rfft2(x.data)
    out = np.stack([spectrum.real, spectrum.imag], axis=-1).astype(x.dtype)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = g[..., 0] + 1j * g[..., 1]
        padded = np.zeros(x.shape, dtype=np.complex128)
        padded[..., :grad.shape[-1]] = grad
        return ((np.fft.ifft2(padded).real * (h * w)).astype(x.dtype),)

    packed = _record('rfft2', (x,), out, vjp)
    return ComplexGrid(real=index(packed, (..., 0)), imag=index(packed, (..., 1)))


def irfft2(spec: ComplexGrid, out_w: int) -> Tensor:
    h, half = spec.shape[-2:]
    if half != _half_width(out_w):
        raise ShapeMismatchError(f'spectrum width {half} is inconsistent with output width {out_w}')
    packed = stack([spec.real, spec.imag], axis=-1)
    dtype = spec.real.dtype
    out = np.fft.irfft2(packed.data[..., 0] + 1j * packed.data[..., 1], s=(h, out_w)).astype(dtype)

    weights = np.full(half, 2.0)
    weights[0] = 1.0
    if out_w % 2 == 0:
        weights[-1] = 1.0

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.fft.rfft2(g) * weights / (h * out_w)
        return (np.stack([grad.real, grad.imag], axis=-1).astype(dtype),)

    return _record('irfft2', (packed,), out, vjp)


def complex_abs(real: Tensor, imag: Tensor) -> Tensor:
    magnitude = np.hypot(real.data, imag.data)
    nonzero = magnitude > 0
    safe = np.where(nonzero, magnitude, 1.0)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # zero subgradient at exactly-zero bins
        scale = np.where(nonzero, g / safe, 0.0)
        return scale * real.data, scale * imag.data

    return _record('complex_abs', (real, imag), magnitude, vjp)


def complex_angle(real: Tensor, imag: Tensor) -> Tensor:
    squared = real.data ** 2 + imag.data ** 2
    nonzero = squared > 0
    safe = np.where(nonzero, squared, 1.0)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scale = np.where(nonzero, g / safe, 0.0)
        return -scale * imag.data, scale * real.data

    return _record('complex_angle', (real, imag), np.arctan2(imag.data, real.data), vjp)
