"""Detection scoring: greedy IoU matching, all-point AP, size bands and PR/ROC curves.

Ground truth is passed as ``{image_id: [GroundTruthBox, ...]}``; detections
carry their own ``image_id``. Precision and recall with an empty denominator
are 1 by convention.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from drebnet.core.errors import InvariantViolation
from drebnet.schemas.records import Box, Detection, GroundTruthBox

logger = logging.getLogger(__name__)

AREA_BOUNDS = (32.0 ** 2, 96.0 ** 2)
ROC_TOP_K = 100
BANDS = ('small', 'medium', 'large')

GroundTruth = Mapping[int, Sequence[GroundTruthBox]]


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MatchLedger:
    det_tp: list[bool] = field(default_factory=list)
    det_scores: list[float] = field(default_factory=list)
    det_match: list[int] = field(default_factory=list)
    gt_matched: list[bool] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def score_order(dets: Sequence[Detection]) -> list[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float) -> MatchLedger:
    """Greedy matching for one (image, class) group; ledger entries follow the input order of ``dets``."""
    ledger = MatchLedger(det_tp=[False] * len(dets), det_scores=[d.score for d in dets],
                         det_match=[-1] * len(dets), gt_matched=[False] * len(gts))
    for i in score_order(dets):
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if ledger.gt_matched[j]:
                continue
            overlap = iou(dets[i].box, gt.box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            ledger.det_tp[i] = True
            ledger.det_match[i] = best
            ledger.gt_matched[best] = True
    return ledger


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def precision_recall(ledgers: MatchLedger | Iterable[MatchLedger]) -> tuple[float, float]:
    if isinstance(ledgers, MatchLedger):
        ledgers = [ledgers]
    tp = fp = fn = 0
    for ledger in ledgers:
        tp, fp, fn = tp + ledger.tp, fp + ledger.fp, fn + ledger.fn
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn)


@dataclass
class ClassMatches:
    """Every detection of one class across the dataset, with its TP flag, best first."""

    scores: np.ndarray
    tp: np.ndarray
    num_gt: int
    num_images: int
    det_area: np.ndarray
    matched_gt_area: np.ndarray

    @property
    def recall(self) -> float:
        return _ratio(int(self.tp.sum()), self.num_gt)


def _class_filter(dets: Sequence[Detection], gts: GroundTruth, class_id: int | None):
    if class_id is None:
        return list(dets), {k: list(v) for k, v in gts.items()}
    return ([d for d in dets if d.class_id == class_id],
            {k: [g for g in v if g.class_id == class_id] for k, v in gts.items()})


def collect_matches(dets: Sequence[Detection], gts: GroundTruth, iou_thresh: float,
                    class_id: int | None = None) -> ClassMatches:
    dets, gts = _class_filter(dets, gts, class_id)
    by_image: dict[int, list[Detection]] = {}
    for det in dets:
        by_image.setdefault(det.image_id, []).append(det)
    images = sorted(set(by_image) | set(gts))

    scores, flags, det_area, gt_area = [], [], [], []
    for image_id in images:
        image_dets = by_image.get(image_id, [])
        image_gts = gts.get(image_id, [])
        ledger = match_detections(image_dets, image_gts, iou_thresh)
        for det, is_tp, match in zip(image_dets, ledger.det_tp, ledger.det_match):
            scores.append(det.score)
            flags.append(is_tp)
            x_min, y_min, x_max, y_max = det.box
            det_area.append((x_max - x_min) * (y_max - y_min))
            gt_area.append(image_gts[match].area if match >= 0 else math.nan)

    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='stable')
    return ClassMatches(
        scores=np.asarray(scores, dtype=np.float64)[order],
        tp=np.asarray(flags, dtype=bool)[order],
        num_gt=sum(len(v) for v in gts.values()),
        num_images=len(images),
        det_area=np.asarray(det_area, dtype=np.float64)[order],
        matched_gt_area=np.asarray(gt_area, dtype=np.float64)[order],
    )


def pr_points(matches: ClassMatches) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(threshold, recall, precision) at every distinct score, highest threshold first."""
    if matches.scores.size == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    ctp = np.cumsum(matches.tp)
    cfp = np.cumsum(~matches.tp)
    # last detection of each run of equal scores
    last = np.flatnonzero(np.append(matches.scores[1:] != matches.scores[:-1], True))
    tp, fp = ctp[last], cfp[last]
    recall = tp / matches.num_gt if matches.num_gt else np.ones(len(last))
    precision = tp / (tp + fp)
    return matches.scores[last], recall, precision


def ap_from_matches(matches: ClassMatches) -> float:
    if matches.num_gt == 0:
        return math.nan
    _, recall, precision = pr_points(matches)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # monotone precision envelope
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(dets: Sequence[Detection], gts: GroundTruth | Sequence[GroundTruthBox], iou_thresh: float,
                      class_id: int | None = None) -> float:
    """All-point interpolated AP; NaN when there is no ground truth to recall."""
    if not isinstance(gts, Mapping):
        gts = {0: list(gts)}
    return ap_from_matches(collect_matches(dets, gts, iou_thresh, class_id))


def mean_ap(per_class: Mapping[int, float]) -> float:
    """Unweighted mean over classes present in the ground truth (NaN entries are absent classes)."""
    present = [ap for ap in per_class.values() if ap is not None and not math.isnan(ap)]
    if not present:
        raise InvariantViolation('mean AP needs at least one class present in the ground truth')
    return float(np.mean(present))


def classes_of(gts: GroundTruth) -> list[int]:
    return sorted({g.class_id for boxes in gts.values() for g in boxes})


def band_of(area: float, area_bounds: tuple[float, float] = AREA_BOUNDS) -> int:
    if area < area_bounds[0]:
        return 0
    if area < area_bounds[1]:
        return 1
    return 2


def size_stratified_map(dets: Sequence[Detection], gts: GroundTruth, iou_thresh: float,
                        area_bounds: tuple[float, float] = AREA_BOUNDS) -> tuple[float | None, float | None, float | None]:
    """mAP per area band; a matched detection follows its ground truth's band, the rest their own area.

    A band without ground truth reports ``None``.
    """
    results: list[float | None] = []
    for band in range(3):
        band_gts = {k: [g for g in v if band_of(g.area, area_bounds) == band] for k, v in gts.items()}
        per_class = {}
        for class_id in classes_of(band_gts):
            matches = collect_matches(dets, gts, iou_thresh, class_id)
            area = np.where(np.isnan(matches.matched_gt_area), matches.det_area, matches.matched_gt_area)
            keep = np.array([band_of(a, area_bounds) == band for a in area], dtype=bool)
            subset = ClassMatches(scores=matches.scores[keep], tp=matches.tp[keep],
                                  num_gt=sum(1 for v in band_gts.values() for g in v if g.class_id == class_id),
                                  num_images=matches.num_images, det_area=matches.det_area[keep],
                                  matched_gt_area=matches.matched_gt_area[keep])
            per_class[class_id] = ap_from_matches(subset)
        results.append(mean_ap(per_class) if per_class else None)
    return results[0], results[1], results[2]


def roc_points(matches: ClassMatches, top_k: int = ROC_TOP_K) -> tuple[np.ndarray, np.ndarray]:
    """ROC with the detection negative count approximated by the unused top-k budget per image."""
    thresholds, recall, _ = pr_points(matches)
    fpr = [0.0]
    tpr = [0.0]
    if thresholds.size:
        ctp = np.cumsum(matches.tp)
        cfp = np.cumsum(~matches.tp)
        last = np.flatnonzero(np.append(matches.scores[1:] != matches.scores[:-1], True))
        budget = top_k * max(matches.num_images, 1)
        for tp, fp, rec in zip(ctp[last], cfp[last], recall):
            negatives = max(budget - int(tp), 1)
            fpr.append(min(fp / negatives, 1.0))
            tpr.append(float(rec) if matches.num_gt else 1.0)
    fpr.append(1.0)
    tpr.append(1.0)
    return np.asarray(fpr), np.asarray(tpr)


def auc(x: np.ndarray, y: np.ndarray) -> float:
    trapezoid = getattr(np, 'trapezoid', None) or np.trapz
    return float(trapezoid(y, x))


def export_curves(dets: Sequence[Detection], gts: GroundTruth, iou_list: Sequence[float], out_dir: str | Path,
                  top_k: int = ROC_TOP_K) -> list[dict[str, object]]:
    """Write PR and ROC CSVs per (class, IoU) and return one summary row per pair."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for class_id in classes_of(gts):
        for iou_thresh in iou_list:
            matches = collect_matches(dets, gts, iou_thresh, class_id)
            thresholds, recall, precision = pr_points(matches)
            tag = f'class{class_id}_iou{iou_thresh:.2f}'
            with open(out_dir / f'pr_{tag}.csv', 'w', newline='', encoding='utf-8') as handle:
                writer = csv.writer(handle)
                writer.writerow(['threshold', 'recall', 'precision'])
                for row in zip(thresholds, recall, precision):
                    writer.writerow([f'{v:.6f}' for v in row])

            fpr, tpr = roc_points(matches, top_k)
            roc_thresholds = ['inf', *[f'{t:.6f}' for t in thresholds], '0']
            with open(out_dir / f'roc_{tag}.csv', 'w', newline='', encoding='utf-8') as handle:
                handle.write(f'# fpr = fp / (fp + tn_proxy); tn_proxy = {top_k} * images - tp - fp\n')
                writer = csv.writer(handle)
                writer.writerow(['threshold', 'fpr', 'tpr'])
                for row in zip(roc_thresholds, fpr, tpr):
                    writer.writerow([row[0], f'{row[1]:.6f}', f'{row[2]:.6f}'])

            summary.append({'class_id': class_id, 'iou': iou_thresh, 'ap': ap_from_matches(matches),
                            'roc_auc': auc(fpr, tpr)})
    logger.info('Wrote PR/ROC curves for %d (class, IoU) pairs to %s', len(summary), out_dir)
    return summary
