"""Rectangle scenes on a textured background, for smoke runs and tests."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from drebnet.engine.rng import stream
from drebnet.schemas.records import DatasetIndex, DatasetRecord, GroundTruthBox
from drebnet.services.dataset import write_image, write_index

logger = logging.getLogger(__name__)

CLASS_COLORS = np.array([
    [0.90, 0.20, 0.15],
    [0.15, 0.35, 0.90],
    [0.20, 0.80, 0.25],
    [0.95, 0.85, 0.10],
], dtype=np.float32)


def _background(rng: np.random.Generator, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    coarse = rng.uniform(0.35, 0.65, size=(max(h // 8, 2), max(w // 8, 2))).astype(np.float32)
    smooth = np.asarray(Image.fromarray(coarse, mode='F').resize((w, h), Image.BICUBIC), dtype=np.float32)
    grain = rng.normal(0.0, 0.02, size=(h, w)).astype(np.float32)
    return np.clip(np.stack([smooth + grain] * 3), 0.0, 1.0)


def render_scene(seed: int, hw: tuple[int, int] = (64, 64), num_classes: int = 2, max_boxes: int = 3,
                 min_side: int = 10, max_side: int = 28) -> tuple[np.ndarray, list[GroundTruthBox]]:
    """Non-overlapping solid rectangles, one color per class; returns CHW image and its boxes."""
    rng = stream(seed, 'scene')
    h, w = hw
    image = _background(rng, hw)
    occupied = np.zeros(hw, dtype=bool)
    boxes: list[GroundTruthBox] = []
    for _ in range(int(rng.integers(1, max_boxes + 1))):
        for _attempt in range(20):
            bw = int(rng.integers(min_side, max_side + 1))
            bh = int(rng.integers(min_side, max_side + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            if occupied[max(y0 - 2, 0):y0 + bh + 2, max(x0 - 2, 0):x0 + bw + 2].any():
                continue
            class_id = int(rng.integers(0, num_classes))
            color = CLASS_COLORS[class_id % len(CLASS_COLORS)]
            image[:, y0:y0 + bh, x0:x0 + bw] = color[:, None, None]
            occupied[y0:y0 + bh, x0:x0 + bw] = True
            boxes.append(GroundTruthBox(class_id=class_id, x_min=x0, y_min=y0, x_max=x0 + bw, y_max=y0 + bh))
            break
    return image, boxes


def write_synthetic_dataset(out_dir: str | Path, count: int, seed: int = 0, hw: tuple[int, int] = (64, 64),
                            num_classes: int = 2, max_boxes: int = 3) -> DatasetIndex:
    """Render ``count`` scenes as PPM files plus an ``index.txt`` next to them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        image, boxes = render_scene(seed * 100003 + i, hw, num_classes, max_boxes)
        path = out_dir / f'scene_{i:04d}.ppm'
        write_image(image, path)
        records.append(DatasetRecord(image_path=str(path), boxes=boxes))
    index = DatasetIndex(records=records)
    write_index(index, out_dir / 'index.txt')
    logger.info('Rendered %d synthetic scene(s) into %s', count, out_dir)
    return index
