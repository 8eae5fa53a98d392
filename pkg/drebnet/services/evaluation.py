"""Dataset evaluation and single-image detection on inference checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from drebnet.core.errors import UsageError
from drebnet.engine.tape import no_grad
from drebnet.engine.tensor import Tensor
from drebnet.models.drebnet import DetOutputs, DrebNet, forward_infer
from drebnet.schemas.records import DatasetIndex, Detection
from drebnet.schemas.run import RunConfig
from drebnet.services.checkpoint import load_checkpoint, restore_model
from drebnet.services.dataset import load_dataset, load_record_image, read_image, resize_sample
from drebnet.services.metrics import (
    GroundTruth,
    ap_from_matches,
    collect_matches,
    export_curves,
    size_stratified_map,
)
from drebnet.services.targets import decode_detections

logger = logging.getLogger(__name__)

BASE_IOU = 0.5
UNDEFINED = 'undefined'


@dataclass
class EvalReport:
    rows: list[tuple[str, float | None]]
    detections: list[Detection] = field(default_factory=list)
    curves: list[dict[str, object]] = field(default_factory=list)

    def value(self, metric: str) -> float | None:
        return dict(self.rows)[metric]


def _mean_defined(values: Sequence[float]) -> float | None:
    defined = [v for v in values if not math.isnan(v)]
    return float(np.mean(defined)) if defined else None


def _iou_tag(iou_thresh: float) -> str:
    return f'{int(round(iou_thresh * 100))}'


def compute_report(dets: Sequence[Detection], gts: GroundTruth, iou_list: Sequence[float],
                   num_classes: int) -> list[tuple[str, float | None]]:
    """Per-class AP/AR at IoU 0.5, size-banded mAP, then mAP/mAR at 0.5 and mAP at every other threshold."""
    rows: list[tuple[str, float | None]] = []
    aps, ars = [], []
    for class_id in range(num_classes):
        matches = collect_matches(dets, gts, BASE_IOU, class_id)
        ap = ap_from_matches(matches)
        ar = matches.recall if matches.num_gt else math.nan
        aps.append(ap)
        ars.append(ar)
        rows.append((f'AP_50/class{class_id}', None if math.isnan(ap) else ap))
        rows.append((f'AR_50/class{class_id}', None if math.isnan(ar) else ar))

    small, medium, large = size_stratified_map(dets, gts, BASE_IOU)
    rows.extend([('mAP_s', small), ('mAP_m', medium), ('mAP_l', large)])
    rows.append(('mAP_50', _mean_defined(aps)))
    rows.append(('mAR_50', _mean_defined(ars)))
    for iou_thresh in iou_list:
        if math.isclose(iou_thresh, BASE_IOU):
            continue
        per_class = [ap_from_matches(collect_matches(dets, gts, iou_thresh, c)) for c in range(num_classes)]
        rows.append((f'mAP_{_iou_tag(iou_thresh)}', _mean_defined(per_class)))
    return rows


def write_report(rows: Sequence[tuple[str, float | None]], path: str | Path) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['metric', 'value'])
        for metric, value in rows:
            writer.writerow([metric, UNDEFINED if value is None else f'{value:.6f}'])


def write_detections(dets: Sequence[Detection], path: str | Path) -> None:
    Path(path).write_text(''.join(det.to_line() + '\n' for det in dets), encoding='utf-8')


def read_detections(path: str | Path) -> list[Detection]:
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    return [Detection.from_line(line) for line in lines if line.strip()]


def detect_array(model: DrebNet, image: np.ndarray, k_max: int = 100, score_thresh: float = 0.1,
                 image_id: int = 0) -> tuple[list[Detection], DetOutputs]:
    """Detections in the coordinates of ``image`` (CHW); resized to the model input when needed."""
    _, h, w = image.shape
    in_h, in_w = model.cfg.input_hw
    resized, _ = resize_sample(image, [], (in_h, in_w))
    with no_grad():
        out = forward_infer(Tensor(resized[None].astype(model.dtype)), model)
    dets = decode_detections(out, k_max=k_max, score_thresh=score_thresh, image_id=image_id,
                             input_hw=(in_h, in_w))
    if (h, w) != (in_h, in_w):
        sx, sy = w / in_w, h / in_h
        dets = [Detection(class_id=d.class_id, score=d.score, image_id=d.image_id,
                          box=(d.box[0] * sx, d.box[1] * sy, d.box[2] * sx, d.box[3] * sy)) for d in dets]
    return dets, out


def run_detector(model: DrebNet, index: DatasetIndex, k_max: int = 100, score_thresh: float = 0.1,
                 workers: int = 1) -> list[Detection]:
    """Detections for every record, image ids following record positions."""
    model.eval()

    def one(position: int) -> list[Detection]:
        image = load_record_image(index.records[position])
        return detect_array(model, image, k_max, score_thresh, image_id=position)[0]

    positions = range(len(index.records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(one, positions))
    else:
        per_image = [one(p) for p in positions]
    return [det for dets in per_image for det in dets]


def _inference_model(ckpt_path: str | Path, allow_train: bool) -> tuple[DrebNet, RunConfig]:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.mode != 'infer' and not allow_train:
        raise UsageError(f'{ckpt_path} is a training checkpoint; pass --allow-train to evaluate it')
    model = restore_model(ckpt)
    model.eval()
    return model, ckpt.config


def evaluate(ckpt_path: str | Path, index_path: str | Path, image_dir: str | Path, iou_list: Sequence[float],
             out_dir: str | Path, allow_train: bool = False, score_thresh: float | None = None,
             workers: int = 1) -> EvalReport:
    model, cfg = _inference_model(ckpt_path, allow_train)
    index = load_dataset(index_path, image_dir, cfg.data.class_map, cfg.data.frame_stride)
    thresh = cfg.detect.score_thresh if score_thresh is None else score_thresh
    dets = run_detector(model, index, k_max=cfg.detect.k_max, score_thresh=thresh, workers=workers)
    gts = index.ground_truth()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = compute_report(dets, gts, iou_list, cfg.model.num_classes)
    write_detections(dets, out_dir / 'detections.txt')
    write_report(rows, out_dir / 'metrics.csv')
    curves = export_curves(dets, gts, iou_list, out_dir / 'curves', top_k=cfg.detect.k_max)
    report = EvalReport(rows=rows, detections=dets, curves=curves)
    logger.info('Evaluated %d image(s): %d detections, mAP_50=%s', len(index.records), len(dets),
                UNDEFINED if report.value('mAP_50') is None else f'{report.value("mAP_50"):.4f}')
    return report


def detect_image(ckpt_path: str | Path, image_path: str | Path, score_thresh: float = 0.1,
                 allow_train: bool = False) -> tuple[list[Detection], DetOutputs]:
    model, cfg = _inference_model(ckpt_path, allow_train)
    return detect_array(model, read_image(image_path), k_max=cfg.detect.k_max, score_thresh=score_thresh)
