"""Motion-blur synthesis from random camera-shake trajectories, and blur-pair statistics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from drebnet.core.errors import InvariantViolation, ShapeMismatchError
from drebnet.engine.rng import stream
from drebnet.schemas.records import TrajectoryParams
from drebnet.services.losses import ssim_index

logger = logging.getLogger(__name__)

STATS_COLUMNS = ('psnr_bin', 'count', 'mean_ssim')


@dataclass
class Trajectory:
    points: np.ndarray
    params: TrajectoryParams
    seed: int


@dataclass
class Psf:
    kernel: np.ndarray

    def __post_init__(self) -> None:
        if self.kernel.ndim != 2 or self.kernel.shape[0] != self.kernel.shape[1] or self.kernel.shape[0] % 2 == 0:
            raise InvariantViolation(f'psf kernel must be square with odd side, got {self.kernel.shape}')

    @property
    def size(self) -> int:
        return self.kernel.shape[0]


@dataclass
class BlurPair:
    sharp: np.ndarray
    blurred: np.ndarray
    psf: Psf
    seed: int


def sample_trajectory(params: TrajectoryParams, seed: int) -> Trajectory:
    """Second-order random walk on the complex plane.

    Velocity is nudged each step by a Gaussian shake and a centripetal pull
    towards the origin; with probability ``anxiety`` times a per-trajectory
    factor it takes an impulsive deflection. Speed stays at
    ``max_jitter / (length_steps - 1)``; the path is centred on its mean.
    """
    rng = stream(seed, 'trajectory')
    n = params.length_steps
    expl = params.anxiety
    step = params.max_jitter / (n - 1)
    centripetal = params.centripetal * rng.uniform()
    big_shake = 0.2 * rng.uniform()
    shake = params.noise_scale * rng.uniform()
    angle = 2.0 * math.pi * rng.uniform()

    velocity = complex(math.cos(angle), math.sin(angle)) * step
    points = np.zeros(n, dtype=np.complex128)
    for t in range(n - 1):
        if rng.uniform() < big_shake * expl:
            turn = 2.0 * velocity * np.exp(1j * (math.pi + (rng.uniform() - 0.5)))
        else:
            turn = 0.0
        noise = complex(rng.standard_normal(), rng.standard_normal())
        velocity = velocity + turn + expl * (shake * noise - centripetal * points[t]) * step
        speed = abs(velocity)
        if speed > 0:
            velocity = velocity / speed * step
        points[t + 1] = points[t] + velocity

    points = points - points.mean()
    return Trajectory(points=np.stack([points.real, points.imag], axis=1), params=params, seed=seed)


def rasterize_psf(t: Trajectory, k_psf: int) -> Psf:
    """Bilinearly splat the exposed part of the path onto a k x k grid and normalise to unit sum."""
    if k_psf < 1 or k_psf % 2 == 0:
        raise InvariantViolation(f'psf size must be a positive odd number, got {k_psf}')
    exposed = max(1, int(math.ceil(t.params.exposure_fraction * len(t.points))))
    kernel = np.zeros((k_psf, k_psf), dtype=np.float64)
    center = k_psf // 2
    total = 0.0
    for x, y in t.points[:exposed]:
        gx, gy = x + center, y + center
        x0, y0 = math.floor(gx), math.floor(gy)
        fx, fy = gx - x0, gy - y0
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                weight = wx * wy
                total += weight
                row, col = y0 + dy, x0 + dx
                if weight and 0 <= row < k_psf and 0 <= col < k_psf:
                    kernel[row, col] += weight
    mass = kernel.sum()
    if mass <= 0:
        raise InvariantViolation(f'trajectory lies entirely outside the {k_psf}x{k_psf} psf grid')
    if mass < total - 1e-9:
        logger.warning('PSF clipped: %.1f%% of trajectory mass fell outside %dx%d grid',
                       100.0 * (1.0 - mass / total), k_psf, k_psf)
    return Psf(kernel=kernel / mass)


def apply_blur(sharp: np.ndarray, psf: Psf, clamp: bool = True) -> np.ndarray:
    """Convolve every channel of a CHW image with the PSF under reflected borders."""
    image = np.asarray(sharp, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    k = psf.size
    _, h, w = image.shape
    if k > h or k > w:
        raise ShapeMismatchError(f'psf {k}x{k} larger than image {h}x{w}')
    r = k // 2
    padded = np.pad(image, ((0, 0), (r, r), (r, r)), mode='reflect')
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    out = np.einsum('chwij,ij->chw', windows, psf.kernel[::-1, ::-1])
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f'psnr inputs differ in shape: {a.shape} vs {b.shape}')
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def make_blur_pair(sharp: np.ndarray, seed: int, params: TrajectoryParams | None = None,
                   k_psf: int = 17) -> BlurPair:
    """(image, seed, params) fully determine the pair."""
    params = params or TrajectoryParams()
    psf = rasterize_psf(sample_trajectory(params, seed), k_psf)
    blurred = apply_blur(sharp, psf).astype(np.asarray(sharp).dtype)
    return BlurPair(sharp=np.asarray(sharp), blurred=blurred, psf=psf, seed=seed)


def psnr_bin(value: float) -> str:
    return 'inf' if math.isinf(value) else str(int(math.floor(value)))


def blur_stats(pairs: Iterable[BlurPair | tuple[np.ndarray, np.ndarray]]) -> list[dict[str, object]]:
    """Image count and mean SSIM per integer PSNR bin, lowest bin first, ``inf`` last."""
    bins: dict[str, list[float]] = {}
    for pair in pairs:
        sharp, blurred = (pair.sharp, pair.blurred) if isinstance(pair, BlurPair) else pair
        bins.setdefault(psnr_bin(psnr(sharp, blurred)), []).append(ssim_index(sharp, blurred))
    if not bins:
        raise InvariantViolation('blur statistics need at least one pair')

    def order(key: str) -> float:
        return math.inf if key == 'inf' else float(key)

    return [
        {'psnr_bin': key, 'count': len(values), 'mean_ssim': float(np.mean(values))}
        for key, values in sorted(bins.items(), key=lambda item: order(item[0]))
    ]


def write_stats_csv(rows: Sequence[dict[str, object]], path: str | Path) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=STATS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, 'mean_ssim': f'{row["mean_ssim"]:.6f}'})
