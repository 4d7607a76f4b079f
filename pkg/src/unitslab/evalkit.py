"""IoU-matched detection metrics: precision, recall, F-measure.

Matching is greedy one-to-one over candidate pairs in descending IoU order
(ties broken by pred index, then gt index), the standard benchmark protocol.
Split metrics are micro-averaged over per-sample counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import (
    DEFAULT_THRESHOLD,
    Box,
    binarize,
    extract_boxes,
    predict_batch,
)
from .params import ParamSet
from .scene import LabeledSample

DEFAULT_IOU = 0.5
EVAL_BATCH = 32


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open pixel boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]


def match_detections(
    preds: list[Box], gts: list[Box], iou_threshold: float = DEFAULT_IOU
) -> MatchResult:
    candidates = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            v = iou(p, g)
            if v >= iou_threshold:
                candidates.append((-v, pi, gi))
    candidates.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for _, pi, gi in candidates:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        pairs.append((pi, gi))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_preds=tuple(i for i in range(len(preds)) if i not in used_p),
        unmatched_gts=tuple(i for i in range(len(gts)) if i not in used_g),
    )


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    fmeasure: float
    num_pred: int
    num_gt: int
    num_matched: int
    per_sample: tuple[tuple[int, int, int, int], ...]  # (sample_id, pred, gt, matched)

    @staticmethod
    def csv_header() -> str:
        return "run_id,stage,strategy,split,precision,recall,fmeasure,num_pred,num_gt,num_matched"

    def csv_row(self, run_id: str, stage: str, strategy: str, split: str) -> str:
        return (
            f"{run_id},{stage},{strategy},{split},"
            f"{self.precision:.6f},{self.recall:.6f},{self.fmeasure:.6f},"
            f"{self.num_pred},{self.num_gt},{self.num_matched}"
        )


def _rates(num_pred: int, num_gt: int, num_matched: int) -> tuple[float, float, float]:
    if num_pred > 0:
        precision = num_matched / num_pred
    else:
        # no predictions: vacuously perfect on an empty scene, else 0
        precision = 1.0 if num_gt == 0 else 0.0
    if num_gt > 0:
        recall = num_matched / num_gt
    else:
        recall = 1.0 if num_pred == 0 else 0.0
    fmeasure = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, fmeasure


def report_from_counts(per_sample: list[tuple[int, int, int, int]]) -> MetricsReport:
    num_pred = sum(r[1] for r in per_sample)
    num_gt = sum(r[2] for r in per_sample)
    num_matched = sum(r[3] for r in per_sample)
    precision, recall, fmeasure = _rates(num_pred, num_gt, num_matched)
    return MetricsReport(
        precision=precision,
        recall=recall,
        fmeasure=fmeasure,
        num_pred=num_pred,
        num_gt=num_gt,
        num_matched=num_matched,
        per_sample=tuple(per_sample),
    )


def evaluate(
    params: ParamSet,
    samples: list[LabeledSample],
    iou_threshold: float = DEFAULT_IOU,
    binarize_threshold: float = DEFAULT_THRESHOLD,
) -> MetricsReport:
    """predict -> binarize -> extract boxes -> match, micro-averaged over a split."""
    if not samples:
        raise ValueError("evaluate: empty split")
    rows: list[tuple[int, int, int, int]] = []
    for start in range(0, len(samples), EVAL_BATCH):
        chunk = samples[start : start + EVAL_BATCH]
        probs = predict_batch(params, np.stack([s.image for s in chunk]))
        for sample, pm in zip(chunk, probs):
            pred_boxes = extract_boxes(binarize(pm, binarize_threshold), prob=pm)
            gt_boxes = list(sample.boxes)
            match = match_detections(pred_boxes, gt_boxes, iou_threshold)
            rows.append((sample.sample_id, len(pred_boxes), len(gt_boxes), len(match.pairs)))
    return report_from_counts(rows)
