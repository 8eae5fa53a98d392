"""DRBT tensor dump: magic, u32 version, u8 dtype code, u32 rank, u32 dims, little-endian payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from drebnet.core.config import TENSOR_DUMP_MAGIC, TENSOR_DUMP_VERSION
from drebnet.core.errors import CheckpointError
from drebnet.engine.tensor import DTYPE_CODES, Tensor

_CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def encode_tensor(array: np.ndarray) -> bytes:
    dtype = np.dtype(array.dtype)
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f'cannot dump element type {dtype}')
    header = TENSOR_DUMP_MAGIC + struct.pack('<IBI', TENSOR_DUMP_VERSION, DTYPE_CODES[dtype], array.ndim)
    dims = struct.pack(f'<{array.ndim}I', *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype=dtype.newbyteorder('<')).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != TENSOR_DUMP_MAGIC:
        raise CheckpointError('not a DRBT tensor dump')
    version, code, rank = struct.unpack_from('<IBI', blob, 4)
    if version != TENSOR_DUMP_VERSION:
        raise CheckpointError(f'unsupported DRBT version {version}')
    if code not in _CODE_DTYPES:
        raise CheckpointError(f'unknown DRBT dtype code {code}')
    offset = 4 + struct.calcsize('<IBI')
    dims = struct.unpack_from(f'<{rank}I', blob, offset)
    offset += 4 * rank
    dtype = _CODE_DTYPES[code].newbyteorder('<')
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return payload.reshape(dims).astype(_CODE_DTYPES[code])


def dump_tensor(tensor: Tensor | np.ndarray, path: str | Path) -> None:
    array = tensor.data if isinstance(tensor, Tensor) else tensor
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: str | Path) -> Tensor:
    return Tensor(decode_tensor(Path(path).read_bytes()))
