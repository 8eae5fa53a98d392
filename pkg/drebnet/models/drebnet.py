"""Dual-stream blur-robust detector.

The detection branch runs DET-Conv stages down to stride 32, three transposed
convolutions back to stride 4 and three heads (center heatmap, box size,
sub-cell offset). The restoration branch is a U-Net style encoder-decoder whose
shallow encoder levels are fused into the detector; its deep half only runs in
the joint training phase and is absent from the inference graph.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from drebnet.core.errors import InvariantViolation, ShapeMismatchError
from drebnet.engine import functional as F
from drebnet.engine.module import Conv2d, Module
from drebnet.engine.rng import stream
from drebnet.engine.tensor import Tensor
from drebnet.models.blocks import (
    HM_BIAS_INIT,
    ConvBnRelu,
    DeconvBnRelu,
    DoubleConv,
    Head,
    UpBlock,
    stage_channels,
)
from drebnet.models.fusion import LfammFilter, MagffParams, lfamm_apply, magff_fuse
from drebnet.schemas.model import ModelConfig

logger = logging.getLogger(__name__)

NUM_LEVELS = 5
OUTPUT_STRIDE = 4
# input clip before the logit that seeds the restored image
RESTORE_EPS = 1e-3
PARAM_GROUPS = ('det_shallow', 'det_deep', 'brab_shallow', 'brab_deep', 'magff', 'lfamm')


class Phase(str, Enum):
    JOINT = 'joint'
    DETACHED_BRAB = 'detached_brab'
    INFERENCE = 'inference'


@dataclass
class DetOutputs:
    hm: Tensor
    wh: Tensor
    reg: Tensor


@dataclass
class BrabOutputs:
    restored: Tensor


class DetShallow(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype: Any = None):
        base = cfg.base_channels
        use_se = cfg.variant == 'full'
        self.stem = ConvBnRelu(cfg.in_channels, base, rng, dtype=dtype)
        self.stages = [
            DoubleConv(stage_channels(base, level - 1), stage_channels(base, level), rng,
                       stride=2, use_se=use_se, dtype=dtype)
            for level in range(1, cfg.shallow_stage + 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


class DetDeep(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype: Any = None):
        base = cfg.base_channels
        use_se = cfg.variant == 'full'
        self.stages = [
            DoubleConv(stage_channels(base, level - 1), stage_channels(base, level), rng,
                       stride=2, use_se=use_se, dtype=dtype)
            for level in range(cfg.shallow_stage + 1, NUM_LEVELS + 1)
        ]
        up_channels = cfg.head_channels or 4 * base
        in_channels = stage_channels(base, NUM_LEVELS)
        self.ups = []
        for _ in range(3):
            self.ups.append(DeconvBnRelu(in_channels, up_channels, rng, dtype=dtype))
            in_channels = up_channels
        self.hm = Head(up_channels, up_channels, cfg.num_classes, rng, bias_init=HM_BIAS_INIT, dtype=dtype)
        self.wh = Head(up_channels, up_channels, 2, rng, dtype=dtype)
        self.reg = Head(up_channels, up_channels, 2, rng, dtype=dtype)

    def forward(self, x: Tensor) -> DetOutputs:
        for stage in self.stages:
            x = stage(x)
        for up in self.ups:
            x = up(x)
        return DetOutputs(hm=F.sigmoid(self.hm(x)), wh=self.wh(x), reg=self.reg(x))


class BrabShallow(Module):
    """Encoder levels 0..shallow_stage; returns every level for the decoder skips."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype: Any = None):
        base = cfg.base_channels
        self.levels = [DoubleConv(cfg.in_channels, base, rng, dtype=dtype)]
        for level in range(1, cfg.shallow_stage + 1):
            self.levels.append(DoubleConv(stage_channels(base, level - 1), stage_channels(base, level), rng,
                                          stride=2, dtype=dtype))

    def forward(self, x: Tensor) -> list[Tensor]:
        features = []
        for level in self.levels:
            x = level(x)
            features.append(x)
        return features


class BrabDeep(Module):
    """Remaining encoder levels down to stride 16 and the full decoder.

    The decoder predicts a correction to the blurred input in logit space; the
    zero-initialised output conv makes the untrained branch return its input.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype: Any = None):
        base = cfg.base_channels
        self.bottom = NUM_LEVELS - 1
        self.levels = [
            DoubleConv(stage_channels(base, level - 1), stage_channels(base, level), rng, stride=2, dtype=dtype)
            for level in range(cfg.shallow_stage + 1, self.bottom + 1)
        ]
        self.ups = [
            UpBlock(stage_channels(base, level + 1), stage_channels(base, level), stage_channels(base, level), rng,
                    dtype=dtype)
            for level in reversed(range(self.bottom))
        ]
        self.out = Conv2d(base, cfg.in_channels, 1, rng, padding=0, dtype=dtype)
        self.out.weight.data[...] = 0.0

    def forward(self, shallow: list[Tensor], image: Tensor) -> BrabOutputs:
        features = list(shallow)
        x = features[-1]
        for level in self.levels:
            x = level(x)
            features.append(x)
        x = features.pop()
        for up in self.ups:
            x = up(x, features.pop())
        clipped = np.clip(image.data, RESTORE_EPS, 1.0 - RESTORE_EPS)
        base_logit = np.log(clipped / (1.0 - clipped)).astype(x.dtype)
        return BrabOutputs(restored=F.sigmoid(F.add(self.out(x), base_logit)))


class DrebNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int, dtype: Any = None):
        self.cfg = cfg
        self.seed = seed
        shallow_channels = stage_channels(cfg.base_channels, cfg.shallow_stage)
        self.det_shallow = DetShallow(cfg, stream(seed, 'init', 'det_shallow'), dtype=dtype)
        self.det_deep = DetDeep(cfg, stream(seed, 'init', 'det_deep'), dtype=dtype)
        self.brab_shallow = None
        self.brab_deep = None
        self.magff = None
        self.lfamm = None
        if cfg.enable_brab:
            self.brab_shallow = BrabShallow(cfg, stream(seed, 'init', 'brab_shallow'), dtype=dtype)
            self.brab_deep = BrabDeep(cfg, stream(seed, 'init', 'brab_deep'), dtype=dtype)
            if cfg.enable_magff:
                self.magff = MagffParams(shallow_channels, stream(seed, 'init', 'magff'),
                                         reduction=cfg.magff_reduction, dtype=dtype)
        elif cfg.enable_magff:
            logger.warning('MAGFF requested without BRAB; fusion falls back to identity')
        if cfg.enable_lfamm:
            stride = 2 ** cfg.shallow_stage
            self.lfamm = LfammFilter(shallow_channels, cfg.input_hw[0] // stride, cfg.input_hw[1] // stride,
                                     dtype=dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.det_shallow.stem.conv.weight.dtype

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {group: {} for group in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[name.split('.', 1)[0]][name] = p
        return groups

    def inference_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters() if not name.startswith('brab_deep.')}

    def inference_state_dict(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.state_dict().items() if not name.startswith('brab_deep.')}

    def num_parameters(self, mode: str = 'train') -> int:
        params = self.parameters() if mode == 'train' else self.inference_parameters()
        return sum(p.size for p in params.values())


def build_model(cfg: ModelConfig, seed: int, dtype: Any = None) -> DrebNet:
    """Deterministically initialise a model from ``seed``; each parameter group draws from its own stream."""
    model = DrebNet(cfg, seed, dtype=dtype)
    logger.info('Built model: variant=%s brab=%s magff=%s lfamm=%s params infer/total=%d/%d',
                cfg.variant, cfg.enable_brab, model.magff is not None, cfg.enable_lfamm,
                model.num_parameters('infer'), model.num_parameters('train'))
    return model


def _check_input(model: DrebNet, x: Tensor) -> None:
    expected = (model.cfg.in_channels, *model.cfg.input_hw)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatchError(f'model expects N x {expected[0]} x {expected[1]} x {expected[2]} images, '
                                 f'got {x.shape}')


def det_shallow(model: DrebNet, x: Tensor) -> Tensor:
    _check_input(model, x)
    return model.det_shallow(x)


def brab_shallow(model: DrebNet, x: Tensor) -> Tensor:
    if model.brab_shallow is None:
        raise InvariantViolation('model was built without the restoration branch')
    _check_input(model, x)
    return model.brab_shallow(x)[-1]


def _fuse(model: DrebNet, s_det: Tensor, s_brab: Tensor | None, allow_resample: bool = False) -> Tensor:
    if model.lfamm is not None:
        s_det = lfamm_apply(s_det, model.lfamm, allow_resample=allow_resample)
    if s_brab is None:
        return s_det
    if model.magff is not None:
        return magff_fuse(s_det, s_brab, model.magff)
    return F.add(s_det, s_brab)


def _detect(model: DrebNet, x: Tensor, allow_resample: bool = False) -> tuple[DetOutputs, list[Tensor] | None]:
    s_det = model.det_shallow(x)
    brab_features = model.brab_shallow(x) if model.brab_shallow is not None else None
    fused = _fuse(model, s_det, brab_features[-1] if brab_features else None, allow_resample=allow_resample)
    return model.det_deep(fused), brab_features


def forward_train(x_blur: Tensor, model: DrebNet, phase: Phase) -> tuple[DetOutputs, BrabOutputs | None]:
    """Run the training graph; the restoration decoder only runs in the joint phase."""
    phase = Phase(phase)
    if phase is Phase.INFERENCE:
        raise InvariantViolation('forward_train does not run the inference graph; use forward_infer')
    _check_input(model, x_blur)
    det_out, brab_features = _detect(model, x_blur)
    if phase is Phase.JOINT and model.brab_deep is not None:
        return det_out, model.brab_deep(brab_features, x_blur)
    return det_out, None


def forward_infer(x: Tensor, model: DrebNet, allow_resample: bool = False) -> DetOutputs:
    """Pruned graph: never touches the restoration decoder."""
    if x.ndim != 4 or x.shape[1] != model.cfg.in_channels:
        raise ShapeMismatchError(f'forward_infer expects N x {model.cfg.in_channels} x H x W, got {x.shape}')
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ShapeMismatchError(f'image sides must be multiples of 32, got {x.shape[2:]}')
    if not allow_resample:
        _check_input(model, x)
    return _detect(model, x, allow_resample=allow_resample)[0]
