"""Annotation index parsing and image IO.

Index lines read ``image_file class_id x_min y_min x_max y_max``; class id -1
marks an ignored region, and a line holding only ``image_file`` declares an
image without objects. Blank lines and ``#`` comments are skipped.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image
from pydantic import ValidationError

from drebnet.core.errors import DatasetError
from drebnet.schemas.records import DatasetIndex, DatasetRecord, GroundTruthBox

logger = logging.getLogger(__name__)

IGNORED_CLASS = -1


def read_image(path: str | Path) -> np.ndarray:
    """8-bit PPM (P6) or PNG to a CHW float32 array in [0, 1]."""
    with Image.open(path) as image:
        rgb = np.asarray(image.convert('RGB'), dtype=np.float32)
    return np.ascontiguousarray(rgb.transpose(2, 0, 1) / 255.0)


def write_image(array: np.ndarray, path: str | Path) -> None:
    data = np.asarray(array)
    if data.ndim == 3:
        data = data.transpose(1, 2, 0)
    pixels = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def resize_sample(image: np.ndarray, boxes: list[GroundTruthBox],
                  hw: tuple[int, int]) -> tuple[np.ndarray, list[GroundTruthBox]]:
    """Bilinear resize of a CHW image to ``hw`` with its boxes scaled alongside."""
    _, h, w = image.shape
    if (h, w) == tuple(hw):
        return image, boxes
    sy, sx = hw[0] / h, hw[1] / w
    resized = np.stack([
        np.asarray(Image.fromarray(channel.astype(np.float32), mode='F').resize((hw[1], hw[0]), Image.BILINEAR))
        for channel in image
    ]).astype(image.dtype)
    scaled = [GroundTruthBox(class_id=b.class_id, x_min=b.x_min * sx, y_min=b.y_min * sy,
                             x_max=b.x_max * sx, y_max=b.y_max * sy) for b in boxes]
    return resized, scaled


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as image:
        width, height = image.size
    return height, width


def _clip(box: tuple[float, float, float, float], hw: tuple[int, int]) -> tuple[float, float, float, float] | None:
    h, w = hw
    x_min, y_min = max(box[0], 0.0), max(box[1], 0.0)
    x_max, y_max = min(box[2], float(w)), min(box[3], float(h))
    if x_max <= x_min or y_max <= y_min:
        return None
    return x_min, y_min, x_max, y_max


def load_dataset(index_path: str | Path, image_dir: str | Path, class_map: Mapping[int, int] | None = None,
                 frame_stride: int = 1) -> DatasetIndex:
    index_path = Path(index_path)
    image_dir = Path(image_dir)
    if not index_path.is_file():
        raise FileNotFoundError(f'annotation index not found: {index_path}')

    order: list[str] = []
    boxes: dict[str, list[GroundTruthBox]] = {}
    ignored: dict[str, list[tuple[float, float, float, float]]] = {}
    sizes: dict[str, tuple[int, int]] = {}
    dropped = clipped = 0

    for line_no, raw in enumerate(index_path.read_text(encoding='utf-8').splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        name = fields[0]
        if name not in sizes:
            path = image_dir / name
            if not path.is_file():
                raise DatasetError(f'{index_path}:{line_no}: image file not found: {path}')
            sizes[name] = _image_size(path)
            order.append(name)
            boxes[name] = []
            ignored[name] = []
        if len(fields) == 1:
            continue
        if len(fields) != 6:
            raise DatasetError(f'{index_path}:{line_no}: expected 6 fields, got {len(fields)}')
        try:
            class_id = int(fields[1])
            coords = tuple(float(v) for v in fields[2:])
        except ValueError as exc:
            raise DatasetError(f'{index_path}:{line_no}: {exc}') from exc
        box = _clip(coords, sizes[name])
        if box is None:
            clipped += 1
            continue
        if class_id == IGNORED_CLASS:
            ignored[name].append(box)
            continue
        if class_map is not None:
            if class_id not in class_map:
                dropped += 1
                continue
            class_id = class_map[class_id]
        try:
            boxes[name].append(GroundTruthBox(class_id=class_id, x_min=box[0], y_min=box[1],
                                              x_max=box[2], y_max=box[3]))
        except ValidationError as exc:
            raise DatasetError(f'{index_path}:{line_no}: invalid box: {exc.errors()[0]["msg"]}') from exc

    kept = order[::frame_stride]
    if clipped:
        logger.warning('Dropped %d annotation(s) lying outside their image', clipped)
    if dropped:
        logger.info('Dropped %d annotation(s) of unmapped classes', dropped)
    logger.info('Loaded %d image record(s) from %s (frame stride %d)', len(kept), index_path, frame_stride)
    return DatasetIndex(records=[
        DatasetRecord(image_path=str(image_dir / name), boxes=boxes[name], ignored_regions=ignored[name])
        for name in kept
    ])


def load_record_image(record: DatasetRecord) -> np.ndarray:
    """Image of a record with every ignored region filled with black."""
    image = read_image(record.image_path)
    for x_min, y_min, x_max, y_max in record.ignored_regions:
        image[:, int(np.floor(y_min)):int(np.ceil(y_max)), int(np.floor(x_min)):int(np.ceil(x_max))] = 0.0
    return image


def write_index(index: DatasetIndex, path: str | Path) -> None:
    lines = []
    for record in index.records:
        name = Path(record.image_path).name
        lines.append(name)
        for box in record.boxes:
            lines.append(f'{name} {box.class_id} {box.x_min:.10g} {box.y_min:.10g} {box.x_max:.10g} {box.y_max:.10g}')
        for x_min, y_min, x_max, y_max in record.ignored_regions:
            lines.append(f'{name} {IGNORED_CLASS} {x_min:.10g} {y_min:.10g} {x_max:.10g} {y_max:.10g}')
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')
