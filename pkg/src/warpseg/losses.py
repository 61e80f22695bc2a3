"""Training losses for the segmentation head, with analytic output gradients.

The layer graphs end at raw conv outputs; softmax, tanh, sigmoid, and the four
losses live here, and each loss returns gradients with respect to those raw
outputs so the tape can take over from there.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Array
from .head import RawPredictions, box_iou_matrix, crop_rect, encode_boxes, sigmoid, softmax

POS_IOU = 0.5
NEG_IOU = 0.4
NEG_POS_RATIO = 3
LOSS_WEIGHTS = {"cls": 1.0, "box": 1.5, "mask": 6.125, "aux": 1.0}


@dataclass
class MatchResult:
    labels: np.ndarray       # [N] -1 ignore, 0 background, else class id
    matched_gt: np.ndarray   # [N] gt index for positives, -1 otherwise

    @property
    def positive_indices(self) -> np.ndarray:
        return np.nonzero(self.labels > 0)[0]


def match_anchors(anchors: Array, gt_boxes: Array, gt_classes: np.ndarray,
                  pos_iou: float = POS_IOU, neg_iou: float = NEG_IOU) -> MatchResult:
    """Threshold matching plus a forced best anchor per ground-truth box.

    IoU >= pos_iou is positive, < neg_iou negative, in between ignored; each
    gt additionally claims its single best-IoU anchor so no object goes
    unsupervised.
    """
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if gt_boxes.shape[0] == 0:
        return MatchResult(labels, matched)
    iou = box_iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    pos = best_iou >= pos_iou
    labels[pos] = gt_classes[best_gt[pos]]
    matched[pos] = best_gt[pos]
    for j in range(gt_boxes.shape[0]):
        i = int(iou[:, j].argmax())
        labels[i] = gt_classes[j]
        matched[i] = j
    return MatchResult(labels, matched)


def _bce_with_logits(z: Array, t: Array) -> tuple[Array, Array]:
    """Stable elementwise BCE and its gradient d/dz = sigmoid(z) - t."""
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return loss.astype(np.float32), (sigmoid(z) - t).astype(np.float32)


def _smooth_l1(d: Array) -> tuple[Array, Array]:
    a = np.abs(d)
    loss = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    grad = np.where(a < 1.0, d, np.sign(d))
    return loss.astype(np.float32), grad.astype(np.float32)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean then strict majority: grid cells more than half covered."""
    h, w = mask.shape
    m = mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return m > 0.5


@dataclass
class LossBundle:
    values: dict[str, float]
    total: float
    grad_cls: Array       # [N, n_classes+1]
    grad_box: Array       # [N, 4]
    grad_coef: Array      # [N, k] w.r.t. raw (pre-tanh) coefficients
    grad_protos: Array    # [k, hp, wp]
    grad_aux: Array       # [1, h3, w3]
    no_positives: bool = False
    notes: list[str] = field(default_factory=list)


def segmentation_losses(raw: RawPredictions, protos: Array, aux_logits: Array,
                        anchors: Array, gt_boxes: Array, gt_classes: np.ndarray,
                        gt_masks: list[np.ndarray], occupancy: np.ndarray,
                        weights: dict[str, float] = LOSS_WEIGHTS) -> LossBundle:
    """Classification, box regression, mask, and auxiliary semantic losses."""
    n, n_cls1 = raw.cls_logits.shape
    k, hp, wp = protos.shape
    match = match_anchors(anchors, gt_boxes, gt_classes)
    pos = match.positive_indices
    num_pos = len(pos)
    notes: list[str] = []

    # --- classification with 3:1 hard negative mining ------------------------
    probs = softmax(raw.cls_logits, axis=1)
    targets = np.where(match.labels > 0, match.labels, 0)
    ce = -np.log(np.clip(probs[np.arange(n), targets], 1e-12, None))
    neg_mask = match.labels == 0
    neg_indices = np.nonzero(neg_mask)[0]
    n_sel = min(len(neg_indices), max(NEG_POS_RATIO * num_pos, 1 if num_pos == 0 else 0))
    order = np.argsort(-ce[neg_indices], kind="stable")
    selected_neg = neg_indices[order[:n_sel]]
    norm = max(num_pos, 1)
    cls_loss = (ce[pos].sum() + ce[selected_neg].sum()) / norm
    grad_cls = np.zeros_like(raw.cls_logits)
    for idx_set in (pos, selected_neg):
        if len(idx_set) == 0:
            continue
        g = probs[idx_set].copy()
        g[np.arange(len(idx_set)), targets[idx_set]] -= 1.0
        grad_cls[idx_set] = g / norm
    grad_cls *= weights["cls"]

    # --- box regression on encoded offsets -----------------------------------
    grad_box = np.zeros_like(raw.box_offsets)
    if num_pos:
        enc = encode_boxes(gt_boxes[match.matched_gt[pos]], anchors[pos])
        diff = raw.box_offsets[pos] - enc
        l, g = _smooth_l1(diff)
        box_loss = float(l.sum() / num_pos)
        grad_box[pos] = g / num_pos * weights["box"]
    else:
        box_loss = 0.0
        notes.append("no positive anchors: box and mask losses zeroed")

    # --- mask loss: BCE inside the gt box at prototype resolution ------------
    grad_coef = np.zeros_like(raw.coefs)
    grad_protos = np.zeros_like(protos)
    mask_loss = 0.0
    if num_pos:
        factor = occupancy.shape[0] // hp
        flat = protos.reshape(k, -1)
        for a in pos.tolist():
            j = int(match.matched_gt[a])
            tanh_c = np.tanh(raw.coefs[a])
            logits = (tanh_c @ flat).reshape(hp, wp)
            gt_small = downsample_mask(gt_masks[j], factor).astype(np.float32)
            x0, y0, x1, y1 = crop_rect(gt_boxes[j], (hp, wp))
            area = (x1 - x0) * (y1 - y0)
            l, dz = _bce_with_logits(logits[y0:y1, x0:x1], gt_small[y0:y1, x0:x1])
            mask_loss += float(l.sum() / area)
            dz_full = np.zeros((hp, wp), dtype=np.float32)
            dz_full[y0:y1, x0:x1] = dz / area
            scale = weights["mask"] / num_pos
            d_tanh = (dz_full.reshape(-1) @ flat.T) * scale
            grad_coef[a] += d_tanh * (1.0 - tanh_c ** 2)
            grad_protos += tanh_c[:, None, None] * dz_full[None] * scale
        mask_loss /= num_pos

    # --- auxiliary class-agnostic semantic loss ------------------------------
    h3, w3 = aux_logits.shape[1:]
    occ_small = downsample_mask(occupancy, occupancy.shape[0] // h3).astype(np.float32)
    l_aux, dz_aux = _bce_with_logits(aux_logits[0], occ_small)
    aux_loss = float(l_aux.mean())
    grad_aux = (dz_aux / dz_aux.size)[None] * weights["aux"]

    values = {"cls": float(cls_loss), "box": box_loss, "mask": mask_loss, "aux": aux_loss}
    total = sum(weights[name] * values[name] for name in values)
    return LossBundle(values=values, total=float(total), grad_cls=grad_cls,
                      grad_box=grad_box, grad_coef=grad_coef, grad_protos=grad_protos,
                      grad_aux=grad_aux, no_positives=num_pos == 0, notes=notes)
