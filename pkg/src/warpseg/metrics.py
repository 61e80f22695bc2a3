"""COCO-style average precision over boxes and masks.

Greedy score-ordered matching per IoU threshold, 101-point interpolated
precision, averaged over thresholds 0.50:0.05:0.95 and over classes that have
ground truth. Matching depends only on score ranking, never on score values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .head import box_iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class PredRecord:
    frame_id: int
    class_id: int
    score: float
    box: np.ndarray            # (cx,cy,w,h) normalized
    mask: np.ndarray | None    # bool, image resolution


@dataclass
class GtRecord:
    frame_id: int
    class_id: int
    box: np.ndarray
    mask: np.ndarray | None


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _ap_from_matches(flags: list[bool], n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt == 0:
        return float("nan")
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum([not f for f in flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    for r in RECALL_POINTS:
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / len(RECALL_POINTS)


def _iou(pred: PredRecord, gt: GtRecord, kind: str) -> float:
    if kind == "mask":
        if pred.mask is None or gt.mask is None:
            return 0.0
        return mask_iou(pred.mask, gt.mask)
    return float(box_iou_matrix(pred.box[None], gt.box[None])[0, 0])


def _class_ap(preds: list[PredRecord], gts: list[GtRecord], threshold: float,
              kind: str) -> float:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score,
                                                     preds[i].frame_id, i))
    matched: set[int] = set()
    flags: list[bool] = []
    for i in order:
        pred = preds[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in matched or gt.frame_id != pred.frame_id:
                continue
            v = _iou(pred, gt, kind)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= threshold:
            matched.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return _ap_from_matches(flags, len(gts))


@dataclass
class APResult:
    mask_ap: float  # in [0,1]
    box_ap: float
    per_class_mask: dict[int, float]
    per_class_box: dict[int, float]


def evaluate_ap(preds: list[PredRecord], gts: list[GtRecord],
                thresholds=IOU_THRESHOLDS) -> APResult:
    """Mask and box AP averaged over IoU thresholds and populated classes."""
    classes = sorted({g.class_id for g in gts})
    per_class_mask: dict[int, float] = {}
    per_class_box: dict[int, float] = {}
    for c in classes:
        c_preds = [p for p in preds if p.class_id == c]
        c_gts = [g for g in gts if g.class_id == c]
        per_class_mask[c] = float(np.mean(
            [_class_ap(c_preds, c_gts, t, "mask") for t in thresholds]))
        per_class_box[c] = float(np.mean(
            [_class_ap(c_preds, c_gts, t, "box") for t in thresholds]))
    mask_ap = float(np.mean(list(per_class_mask.values()))) if classes else float("nan")
    box_ap = float(np.mean(list(per_class_box.values()))) if classes else float("nan")
    return APResult(mask_ap=mask_ap, box_ap=box_ap,
                    per_class_mask=per_class_mask, per_class_box=per_class_box)


# --------------------------------------------------------------------------
# Line-delimited prediction records (for offline evaluation and diffing)
# --------------------------------------------------------------------------

def format_pred_record(p: PredRecord) -> str:
    from .yedg import rle_encode
    box = ",".join(f"{v:.6f}" for v in p.box)
    rle = ",".join(str(c) for c in rle_encode(p.mask)) if p.mask is not None else ""
    return f"frame={p.frame_id} class={p.class_id} score={p.score:.6f} box={box} rle={rle}"


def parse_pred_record(line: str, mask_hw: tuple[int, int]) -> PredRecord:
    from .yedg import rle_decode
    fields = dict(part.split("=", 1) for part in line.strip().split(" "))
    box = np.array([float(v) for v in fields["box"].split(",")], dtype=np.float32)
    mask = None
    if fields.get("rle"):
        counts = [int(c) for c in fields["rle"].split(",")]
        mask = rle_decode(counts, mask_hw)
    return PredRecord(frame_id=int(fields["frame"]), class_id=int(fields["class"]),
                      score=float(fields["score"]), box=box, mask=mask)
