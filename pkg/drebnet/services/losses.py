"""Detection and restoration objectives, built from engine ops so they backpropagate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from drebnet.core.errors import InvariantViolation, ShapeMismatchError
from drebnet.engine import functional as F
from drebnet.engine.tape import no_grad
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import Phase
from drebnet.schemas.run import LossWeights

PROB_CLAMP = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(value: Any) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def focal_loss(hm_pred: Tensor, hm_t: Any, pos_mask: Any = None, gamma: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss over all heatmap locations, normalised by the positive count.

    Positives are the exact peaks of ``hm_t``. ``pos_mask`` may restrict them:
    a per-class mask shaped like ``hm_t`` is used as given, a per-cell mask
    ``[..., H, W]`` keeps only the peaks lying on its cells. Negatives near a
    peak are down-weighted by ``(1 - hm_t) ** beta``.
    """
    target = _as_array(hm_t)
    if target.shape != hm_pred.shape:
        raise ShapeMismatchError(f'heatmap prediction {hm_pred.shape} vs target {target.shape}')
    pos = target == 1.0
    if pos_mask is not None:
        mask = _as_array(pos_mask).astype(bool)
        if mask.shape == target.shape:
            pos = mask
        elif mask.shape == target.shape[:-3] + target.shape[-2:]:
            pos = pos & np.expand_dims(mask, axis=-3)
        else:
            raise ShapeMismatchError(f'focal loss mask {mask.shape} fits neither {target.shape} nor its cells')
    dtype = hm_pred.dtype
    pos_w = pos.astype(dtype)
    neg_w = ((1.0 - target) ** beta * ~pos).astype(dtype)
    normalizer = max(int(pos.sum()), 1)

    p = F.clamp(hm_pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus_p = F.sub(1.0, p)
    pos_term = F.sum(F.mul(F.mul(F.pow_scalar(one_minus_p, gamma), F.log(p)), pos_w))
    neg_term = F.sum(F.mul(F.mul(F.pow_scalar(p, gamma), F.log(one_minus_p)), neg_w))
    return F.mul(F.add(pos_term, neg_term), -1.0 / normalizer)


def _masked_l1(pred: Tensor, target: Any, pos_mask: Any, name: str) -> Tensor:
    target = _as_array(target)
    if target.shape != pred.shape:
        raise ShapeMismatchError(f'{name} prediction {pred.shape} vs target {target.shape}')
    mask = _as_array(pos_mask).astype(bool)
    # cell mask [..., H, W] broadcast over the two channels
    weight = np.expand_dims(mask, axis=-3).astype(pred.dtype)
    count = max(int(mask.sum()), 1)
    return F.mul(F.sum(F.mul(F.abs(F.sub(pred, target)), weight)), 1.0 / count)


def wh_loss(wh_pred: Tensor, wh_t: Any, pos_mask: Any) -> Tensor:
    return _masked_l1(wh_pred, wh_t, pos_mask, 'wh')


def offset_loss(reg_pred: Tensor, reg_t: Any, pos_mask: Any) -> Tensor:
    return _masked_l1(reg_pred, reg_t, pos_mask, 'offset')


def mse_loss(restored: Tensor, sharp: Any) -> Tensor:
    sharp = _as_array(sharp)
    if sharp.shape != restored.shape:
        raise ShapeMismatchError(f'restored {restored.shape} vs sharp {sharp.shape}')
    diff = F.sub(restored, sharp)
    return F.mean(F.mul(diff, diff))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-coords ** 2 / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x: Tensor, y: Any, window: np.ndarray | None = None, data_range: float = 1.0) -> Tensor:
    """Per-channel SSIM over every valid (stride 1) window position."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
    if x.shape != y.shape:
        raise ShapeMismatchError(f'ssim inputs differ in shape: {x.shape} vs {y.shape}')
    window = gaussian_window() if window is None else window
    k = window.shape[-1]
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeMismatchError(f'ssim needs images of at least {k}x{k}, got {h}x{w}')
    kernel = Tensor(window.reshape(1, 1, k, k).astype(x.dtype))

    def blur(t: Tensor) -> Tensor:
        return F.conv2d(F.reshape(t, (n * c, 1, h, w)), kernel)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = F.mul(mu_x, mu_x), F.mul(mu_y, mu_y), F.mul(mu_x, mu_y)
    var_x = F.sub(blur(F.mul(x, x)), mu_xx)
    var_y = F.sub(blur(F.mul(y, y)), mu_yy)
    cov = F.sub(blur(F.mul(x, y)), mu_xy)
    numerator = F.mul(F.add(F.mul(mu_xy, 2.0), c1), F.add(F.mul(cov, 2.0), c2))
    denominator = F.mul(F.add(F.add(mu_xx, mu_yy), c1), F.add(F.add(var_x, var_y), c2))
    return F.div(numerator, denominator)


def ssim_loss(restored: Tensor, sharp: Any, window: np.ndarray | None = None, data_range: float = 1.0) -> Tensor:
    return F.sub(1.0, F.mean(ssim_map(restored, sharp, window, data_range)))


def ssim_index(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM of two CHW (or HW) arrays, evaluated in f64 without recording."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    while a.ndim < 4:
        a, b = a[None], b[None]
    with no_grad():
        return float(F.mean(ssim_map(Tensor(a), Tensor(b), data_range=data_range)).item())


@dataclass
class LossParts:
    hm: Any
    wh: Any
    off: Any
    mse: Any = None
    ssim: Any = None

    def as_dict(self) -> dict[str, float | None]:
        return {name: None if value is None else float(_as_array(value).reshape(-1)[0])
                for name, value in vars(self).items()}


def total_loss(parts: LossParts, w: LossWeights, phase: Phase) -> Tensor:
    phase = Phase(phase)
    total = F.add(F.add(F.mul(F.as_tensor(parts.hm), w.w_hm), F.mul(F.as_tensor(parts.wh), w.w_wh)),
                  F.mul(F.as_tensor(parts.off), w.w_off))
    if phase is Phase.JOINT:
        if parts.mse is None or parts.ssim is None:
            raise InvariantViolation('joint phase needs both restoration loss parts')
        total = F.add(total, F.add(F.mul(F.as_tensor(parts.mse), w.w_mse), F.mul(F.as_tensor(parts.ssim), w.w_ssim)))
    return total
