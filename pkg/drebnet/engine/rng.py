"""Named-stream splittable random generators.

Every random draw (init, augmentation, blur) comes from a generator keyed by
``(seed, *names)`` so runs are reproducible regardless of call order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str | int) -> int:
    digest = hashlib.sha256(str(name).encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'little')


def stream(seed: int, *names: str | int) -> np.random.Generator:
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(_name_key(n) for n in names))
    return np.random.default_rng(sequence)


def derive_seed(seed: int, *names: str | int) -> int:
    return int(stream(seed, *names).integers(0, 2 ** 31 - 1))
