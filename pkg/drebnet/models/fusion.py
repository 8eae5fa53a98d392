"""Attention-gated two-stream fusion and learnable frequency amplitude modulation."""
from __future__ import annotations

import logging
from typing import Any

import numpy as np
from PIL import Image

from drebnet.core.errors import InvariantViolation, ShapeMismatchError
from drebnet.engine import functional as F
from drebnet.engine.module import BatchNorm2d, Conv2d, Module
from drebnet.engine.spectral import ComplexGrid, irfft2, rfft2
from drebnet.engine.tensor import Tensor, parameter, resolve_dtype

logger = logging.getLogger(__name__)


class AttentionBranch(Module):
    """conv1x1 (C -> C/r), BN, ReLU, conv1x1 (C/r -> C), BN."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator, dtype: Any = None):
        hidden = channels // reduction
        self.conv1 = Conv2d(channels, hidden, 1, rng, padding=0, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.conv2 = Conv2d(hidden, channels, 1, rng, padding=0, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))


class MagffStageParams(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype: Any = None):
        if reduction < 1 or channels % reduction:
            raise InvariantViolation(f'reduction ratio {reduction} must divide channel count {channels}')
        self.channels = channels
        self.reduction = reduction
        self.local = AttentionBranch(channels, reduction, rng, dtype=dtype)
        self.global_ = AttentionBranch(channels, reduction, rng, dtype=dtype)


class MagffParams(Module):
    """Two independent attention stages: the second re-derives its gate on the stage-one output."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype: Any = None):
        self.stage1 = MagffStageParams(channels, rng, reduction, dtype=dtype)
        self.stage2 = MagffStageParams(channels, rng, reduction, dtype=dtype)

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        return magff_fuse(x1, x2, self)


def _check_channels(x: Tensor, p: MagffStageParams) -> None:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeMismatchError(f'attention expects NCHW with {p.channels} channels, got {x.shape}')


def local_attention(x: Tensor, p: MagffStageParams) -> Tensor:
    _check_channels(x, p)
    return p.local(x)


def global_attention(x: Tensor, p: MagffStageParams) -> Tensor:
    _check_channels(x, p)
    return p.global_(F.adaptive_avg_pool(x))


def attention_gate(x: Tensor, p: MagffStageParams) -> Tensor:
    # the C x 1 x 1 global map broadcasts over H x W
    return F.sigmoid(F.add(local_attention(x, p), global_attention(x, p)))


def magff_fuse(x1: Tensor, x2: Tensor, p: MagffParams) -> Tensor:
    """Fuse the detection-branch map ``x1`` with the restoration-branch map ``x2``.

    Stage one gates ``x1`` against ``x2``; stage two gates the stage-one output
    against ``x2`` again. Both are convex combinations, so equal operands come
    back unchanged.
    """
    if x1.shape != x2.shape:
        raise ShapeMismatchError(f'magff inputs differ in shape: {x1.shape} vs {x2.shape}')
    w1 = attention_gate(x1, p.stage1)
    x_out = F.lerp(x2, x1, w1)
    w2 = attention_gate(x_out, p.stage2)
    return F.lerp(x2, x_out, w2)


class LfammFilter(Module):
    def __init__(self, channels: int, height: int, width: int, dtype: Any = None):
        self.channels = channels
        self.height = height
        self.width = width
        self.weights = parameter(np.ones((channels, height, width // 2 + 1), dtype=resolve_dtype(dtype)))

    def forward(self, x: Tensor, allow_resample: bool = False) -> Tensor:
        return lfamm_apply(x, self, allow_resample=allow_resample)


def resample_filter(weights: np.ndarray, height: int, half_width: int) -> np.ndarray:
    """Bilinearly resample a [C, H, W//2+1] filter; the H axis is centred on DC first."""
    resampled = []
    for channel in weights:
        centred = np.fft.fftshift(channel, axes=0).astype(np.float32)
        image = Image.fromarray(centred, mode='F').resize((half_width, height), Image.BILINEAR)
        resampled.append(np.fft.ifftshift(np.asarray(image, dtype=np.float64), axes=0))
    return np.stack(resampled).astype(weights.dtype)


def lfamm_apply(x: Tensor, f: LfammFilter, allow_resample: bool = False) -> Tensor:
    """Scale the amplitude spectrum of ``x`` by the learnable filter, keep the phase, return to space."""
    if x.ndim != 4 or x.shape[1] != f.channels:
        raise ShapeMismatchError(f'lfamm expects NCHW with {f.channels} channels, got {x.shape}')
    h, w = x.shape[2:]
    weights: Tensor = f.weights
    if (h, w // 2 + 1) != f.weights.shape[1:]:
        if not allow_resample:
            raise ShapeMismatchError(
                f'lfamm filter built for {f.height}x{f.width}, input is {h}x{w}')
        logger.warning('Resampling LFAMM filter from %dx%d to %dx%d', f.height, f.width, h, w)
        weights = Tensor(resample_filter(f.weights.data, h, w // 2 + 1))

    spectrum = rfft2(x)
    amplitude = F.mul(spectrum.abs(), weights)
    phase = spectrum.angle()
    modulated = ComplexGrid(real=F.mul(amplitude, F.cos(phase)), imag=F.mul(amplitude, F.sin(phase)))
    return irfft2(modulated, w)
