"""Keypoint supervision: Gaussian center heatmaps, size and offset maps, and their inverse."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from drebnet.core.errors import InvariantViolation
from drebnet.models.drebnet import OUTPUT_STRIDE, DetOutputs
from drebnet.schemas.records import Detection, GroundTruthBox

logger = logging.getLogger(__name__)


@dataclass
class TargetMaps:
    hm_t: np.ndarray
    wh_t: np.ndarray
    reg_t: np.ndarray
    pos_mask: np.ndarray
    skipped: int = 0

    @property
    def num_pos(self) -> int:
        return int(self.pos_mask.sum())

    @property
    def hm_pos(self) -> np.ndarray:
        """Per-class positive locations: the exact kernel peaks."""
        return self.hm_t == 1.0


def stack_targets(maps: Sequence[TargetMaps]) -> TargetMaps:
    return TargetMaps(
        hm_t=np.stack([m.hm_t for m in maps]),
        wh_t=np.stack([m.wh_t for m in maps]),
        reg_t=np.stack([m.reg_t for m in maps]),
        pos_mask=np.stack([m.pos_mask for m in maps]),
        skipped=sum(m.skipped for m in maps),
    )


def gaussian_radius(box_hw: tuple[float, float], min_overlap: float = 0.7) -> float:
    """Largest center-corner perturbation keeping IoU >= ``min_overlap`` in all three corner cases.

    Case one shifts one corner pair, case two shrinks the box, case three grows it;
    each is a quadratic in the radius and the smallest admissible root wins.
    """
    h, w = box_hw
    if h <= 0 or w <= 0:
        return 0.0
    m = min_overlap

    a1, b1, c1 = 1.0, h + w, w * h * (1 - m) / (1 + m)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * a1 * c1, 0.0))) / (2 * a1)

    a2, b2, c2 = 4.0, 2 * (h + w), (1 - m) * w * h
    r2 = (b2 - math.sqrt(max(b2 * b2 - 4 * a2 * c2, 0.0))) / (2 * a2)

    a3, b3, c3 = 4 * m, -2 * m * (h + w), (m - 1) * w * h
    r3 = (b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / (2 * a3)

    return max(0.0, min(r1, r2, r3))


def draw_gaussian(heatmap: np.ndarray, center: tuple[int, int], radius: float) -> None:
    """Max-splat an unnormalised Gaussian (sigma = radius / 3) peaking at 1.0 on ``center``."""
    cx, cy = center
    h, w = heatmap.shape
    r = int(radius)
    sigma = radius / 3.0
    offsets = np.arange(-r, r + 1)
    if r == 0:
        kernel = np.ones((1, 1))
    else:
        d2 = offsets[None, :] ** 2 + offsets[:, None] ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
    left, right = min(cx, r), min(w - cx, r + 1)
    top, bottom = min(cy, r), min(h - cy, r + 1)
    region = heatmap[cy - top:cy + bottom, cx - left:cx + right]
    patch = kernel[r - top:r + bottom, r - left:r + right].astype(heatmap.dtype)
    np.maximum(region, patch, out=region)


def _clip_box(box: GroundTruthBox, input_hw: tuple[int, int]) -> tuple[float, float, float, float] | None:
    h, w = input_hw
    x_min, y_min = max(box.x_min, 0.0), max(box.y_min, 0.0)
    x_max, y_max = min(box.x_max, float(w)), min(box.y_max, float(h))
    if x_max <= x_min or y_max <= y_min:
        return None
    return x_min, y_min, x_max, y_max


def encode_targets(boxes: Sequence[GroundTruthBox], num_classes: int, input_hw: tuple[int, int],
                   min_overlap: float = 0.7, stride: int = OUTPUT_STRIDE, dtype=np.float32) -> TargetMaps:
    h, w = input_hw[0] // stride, input_hw[1] // stride
    hm_t = np.zeros((num_classes, h, w), dtype=dtype)
    wh_t = np.zeros((2, h, w), dtype=dtype)
    reg_t = np.zeros((2, h, w), dtype=dtype)
    pos_mask = np.zeros((h, w), dtype=bool)
    skipped = 0

    for box in boxes:
        if box.class_id >= num_classes:
            raise InvariantViolation(f'class id {box.class_id} outside [0, {num_classes})')
        clipped = _clip_box(box, input_hw)
        if clipped is None:
            skipped += 1
            continue
        x_min, y_min, x_max, y_max = clipped
        cx = (x_min + x_max) / 2.0 / stride
        cy = (y_min + y_max) / 2.0 / stride
        ix = min(int(math.floor(cx)), w - 1)
        iy = min(int(math.floor(cy)), h - 1)
        box_w = (x_max - x_min) / stride
        box_h = (y_max - y_min) / stride

        draw_gaussian(hm_t[box.class_id], (ix, iy), gaussian_radius((box_h, box_w), min_overlap))
        # a later box sharing this cell overwrites size and offset
        wh_t[:, iy, ix] = (box_w, box_h)
        reg_t[:, iy, ix] = (cx - ix, cy - iy)
        pos_mask[iy, ix] = True

    if skipped:
        logger.warning('Skipped %d box(es) lying fully outside the %dx%d image', skipped, *input_hw)
    return TargetMaps(hm_t=hm_t, wh_t=wh_t, reg_t=reg_t, pos_mask=pos_mask, skipped=skipped)


def local_maximum(hm: np.ndarray) -> np.ndarray:
    """3x3 max-pool (stride 1, same size) over the last two axes."""
    pad = [(0, 0)] * (hm.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(hm, pad, constant_values=-np.inf)
    return sliding_window_view(padded, (3, 3), axis=(-2, -1)).max(axis=(-2, -1))


def decode_detections(out: DetOutputs, k_max: int = 100, score_thresh: float = 0.1, batch_index: int = 0,
                      image_id: int = 0, input_hw: tuple[int, int] | None = None) -> list[Detection]:
    """Peaks of the heatmap that survive 3x3 suppression, best first, expanded into boxes."""
    hm = out.hm.data[batch_index]
    wh = out.wh.data[batch_index]
    reg = out.reg.data[batch_index]
    num_classes, h, w = hm.shape
    img_h, img_w = input_hw or (h * OUTPUT_STRIDE, w * OUTPUT_STRIDE)

    keep = (hm == local_maximum(hm)) & (hm > score_thresh)
    candidates = np.flatnonzero(keep)
    scores = hm.reshape(-1)[candidates]
    order = candidates[np.argsort(-scores, kind='stable')][:k_max]

    detections = []
    for flat in order:
        class_id, cell = divmod(int(flat), h * w)
        y, x = divmod(cell, w)
        cx = OUTPUT_STRIDE * (x + float(reg[0, y, x]))
        cy = OUTPUT_STRIDE * (y + float(reg[1, y, x]))
        half_w = OUTPUT_STRIDE * max(float(wh[0, y, x]), 0.0) / 2.0
        half_h = OUTPUT_STRIDE * max(float(wh[1, y, x]), 0.0) / 2.0
        x_min = min(max(cx - half_w, 0.0), img_w)
        y_min = min(max(cy - half_h, 0.0), img_h)
        x_max = min(max(cx + half_w, x_min), img_w)
        y_max = min(max(cy + half_h, y_min), img_h)
        detections.append(Detection(class_id=class_id, box=(x_min, y_min, x_max, y_max),
                                    score=float(hm[class_id, y, x]), image_id=image_id))
    return detections
