"""DRBC checkpoints.

Layout (all integers little-endian u32 unless noted)::

    b'DRBC' | version | mode (u8: 0 train, 1 infer) | sha256(config json) (32 bytes)
    | len + config json | len + meta json
    | tensor count | per tensor: len + utf-8 name, rank, dims, f32 payload

Tensors are written in name order so identical state gives identical bytes.
Training checkpoints also carry Adam moments as ``adam.m.<param>`` and
``adam.v.<param>``; inference checkpoints never hold ``brab_deep.`` entries.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np

from drebnet.core.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from drebnet.core.errors import CheckpointError
from drebnet.engine.optim import OptimState
from drebnet.models.drebnet import DrebNet, build_model
from drebnet.schemas.run import RunConfig

logger = logging.getLogger(__name__)

Mode = Literal['train', 'infer']

_MODE_CODES = {'train': 0, 'infer': 1}
_CODE_MODES = {code: mode for mode, code in _MODE_CODES.items()}
FIRST_MOMENT = 'adam.m.'
SECOND_MOMENT = 'adam.v.'
PRUNED_PREFIX = 'brab_deep.'


@dataclass
class Checkpoint:
    mode: Mode
    config: RunConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    def model_state(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.tensors.items()
                if not name.startswith((FIRST_MOMENT, SECOND_MOMENT))}


def config_json(cfg: RunConfig) -> bytes:
    return json.dumps(cfg.model_dump(mode='json'), sort_keys=True, separators=(',', ':')).encode('utf-8')


def config_digest(cfg: RunConfig) -> bytes:
    return hashlib.sha256(config_json(cfg)).digest()


def make_checkpoint(model: DrebNet, cfg: RunConfig, mode: Mode, optim: OptimState | None = None,
                    epoch: int = 0) -> Checkpoint:
    if mode == 'infer':
        return Checkpoint(mode='infer', config=cfg, tensors=dict(model.inference_state_dict()),
                          meta={'epoch': epoch})
    tensors = dict(model.state_dict())
    meta: dict[str, Any] = {'epoch': epoch}
    if optim is not None:
        meta.update(step=optim.step, rule=optim.rule)
        for name, value in optim.first_moment.items():
            tensors[FIRST_MOMENT + name] = value
        for name, value in optim.second_moment.items():
            tensors[SECOND_MOMENT + name] = value
    return Checkpoint(mode='train', config=cfg, tensors=tensors, meta=meta)


def _u32(value: int) -> bytes:
    return struct.pack('<I', value)


def _blob(data: bytes) -> bytes:
    return _u32(len(data)) + data


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.mode == 'infer':
        leaked = [name for name in ckpt.tensors if name.startswith(PRUNED_PREFIX)]
        if leaked:
            raise CheckpointError(f'inference checkpoint must not hold restoration decoder tensors: {leaked[:3]}')
    cfg_bytes = config_json(ckpt.config)
    parts = [
        CHECKPOINT_MAGIC,
        _u32(CHECKPOINT_VERSION),
        struct.pack('<B', _MODE_CODES[ckpt.mode]),
        hashlib.sha256(cfg_bytes).digest(),
        _blob(cfg_bytes),
        _blob(json.dumps(ckpt.meta, sort_keys=True, separators=(',', ':')).encode('utf-8')),
        _u32(len(ckpt.tensors)),
    ]
    for name in sorted(ckpt.tensors):
        array = np.asarray(ckpt.tensors[name])
        parts.append(_blob(name.encode('utf-8')))
        parts.append(_u32(array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointError('checkpoint is truncated')
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError('not a DRBC checkpoint')
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}')
    code = reader.take(1)[0]
    if code not in _CODE_MODES:
        raise CheckpointError(f'unknown checkpoint mode code {code}')
    digest = reader.take(32)
    cfg_bytes = reader.blob()
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise CheckpointError('config digest mismatch; checkpoint is corrupt')
    try:
        config = RunConfig.model_validate(json.loads(cfg_bytes))
        meta = json.loads(reader.blob())
    except ValueError as exc:
        raise CheckpointError(f'unreadable checkpoint header: {exc}') from exc

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.blob().decode('utf-8')
        rank = reader.u32()
        dims = struct.unpack(f'<{rank}I', reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(dims).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointError(f'{len(data) - reader.offset} trailing bytes after the last tensor')

    ckpt = Checkpoint(mode=_CODE_MODES[code], config=config, tensors=tensors, meta=meta)
    if ckpt.mode == 'infer' and any(name.startswith(PRUNED_PREFIX) for name in tensors):
        raise CheckpointError('inference checkpoint holds restoration decoder tensors')
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> int:
    data = encode_checkpoint(ckpt)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    logger.info('Saved %s checkpoint with %d tensors (%d bytes) to %s', ckpt.mode, len(ckpt.tensors), len(data), path)
    return len(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'checkpoint not found: {path}')
    return decode_checkpoint(path.read_bytes())


def restore_model(ckpt: Checkpoint, dtype: Any = None) -> DrebNet:
    """Rebuild the model of a checkpoint and load its weights; inference checkpoints leave the decoder at init."""
    model = build_model(ckpt.config.model, ckpt.config.seed, dtype=dtype)
    try:
        missing = model.load_state_dict(ckpt.model_state(), strict=ckpt.mode == 'train')
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f'checkpoint does not fit its own config: {exc}') from exc
    unexpected = [name for name in missing if not name.startswith(PRUNED_PREFIX)]
    if unexpected:
        raise CheckpointError(f'inference checkpoint lacks detector tensors: {unexpected[:5]}')
    model.train(ckpt.mode == 'train')
    return model


def restore_optimizer(ckpt: Checkpoint, state: OptimState) -> OptimState:
    if ckpt.mode != 'train':
        raise CheckpointError('only training checkpoints carry optimizer state')
    state.step = int(ckpt.meta.get('step', 0))
    state.first_moment = {name[len(FIRST_MOMENT):]: value for name, value in ckpt.tensors.items()
                          if name.startswith(FIRST_MOMENT)}
    state.second_moment = {name[len(SECOND_MOMENT):]: value for name, value in ckpt.tensors.items()
                           if name.startswith(SECOND_MOMENT)}
    return state
