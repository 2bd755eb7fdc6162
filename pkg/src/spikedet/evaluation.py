"""Detection accuracy: IoU, greedy matching and precision/recall at ground-truth frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .clustering import BoundingBox
from .io import DetectionRecord, GroundTruthFrame

IOU_THRESHOLD = 0.5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with inclusive pixel areas."""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class MatchResult:
    best_iou: Tuple[float, ...]  # per ground-truth box
    matched: Tuple[Optional[int], ...]  # prediction index per ground-truth box
    unmatched: Tuple[int, ...]  # prediction indices never matched

    @property
    def n_gt(self) -> int:
        return len(self.best_iou)


def match(preds: Sequence[BoundingBox], gts: Sequence[BoundingBox]) -> MatchResult:
    """Greedy matching in ground-truth order.

    Each ground truth takes the still-unmatched prediction with the highest
    IoU, ties going to the lowest prediction index.  Predictions that do not
    overlap a ground truth at all are never matched to it.
    """
    free = list(range(len(preds)))
    best, matched = [], []
    for g in gts:
        pick, score = None, 0.0
        for i in free:
            v = iou(preds[i], g)
            if v > score:
                pick, score = i, v
        if pick is not None:
            free.remove(pick)
        best.append(score)
        matched.append(pick)
    return MatchResult(tuple(best), tuple(matched), tuple(free))


@dataclass(frozen=True)
class Metrics:
    mean_iou: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class FrameResult:
    t_us: int
    n_pred: int
    result: MatchResult


def metrics(frames: Sequence[FrameResult], strict_paper_fp: bool = False,
            threshold: float = IOU_THRESHOLD) -> Metrics:
    """Aggregate per-frame matches.

    A prediction at a frame with no ground truth is always a false positive.
    Unmatched predictions at frames that do have ground truth also count,
    unless ``strict_paper_fp`` is set.
    """
    tp = fp = fn = 0
    ious: List[float] = []
    for fr in frames:
        r = fr.result
        if r.n_gt == 0:
            fp += fr.n_pred
            continue
        ious.extend(r.best_iou)
        hits = sum(1 for v in r.best_iou if v >= threshold)
        tp += hits
        fn += r.n_gt - hits
        if not strict_paper_fp:
            fp += len(r.unmatched)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    mean = sum(ious) / len(ious) if ious else 0.0
    return Metrics(mean, precision, recall, tp, fp, fn)


def frame_results(pred: Sequence[DetectionRecord], gt: Sequence[GroundTruthFrame]) -> List[FrameResult]:
    """Match predictions against each ground-truth frame.

    Only records whose timestamp equals a ground-truth timestamp are used;
    a frame without a record is treated as having no predictions.
    """
    by_t: Dict[int, DetectionRecord] = {r.t_us: r for r in pred}
    out = []
    for frame in gt:
        rec = by_t.get(frame.t_us)
        boxes = [b.box for b in rec.boxes] if rec is not None else []
        out.append(FrameResult(frame.t_us, len(boxes), match(boxes, [g.box for g in frame.boxes])))
    return out


def evaluate(pred: Sequence[DetectionRecord], gt: Sequence[GroundTruthFrame],
             strict_paper_fp: bool = False) -> Metrics:
    return metrics(frame_results(pred, gt), strict_paper_fp=strict_paper_fp)
