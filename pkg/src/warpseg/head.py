"""Prototype-based segmentation head: anchors, predictions, NMS, mask assembly.

A small prototype network turns P3 into k full-image mask prototypes at
stride 4; a shared prediction head over P3-P7 emits per-anchor class logits,
box offsets, and k mask coefficients. Instance masks are sigmoid-activated
linear combinations of the prototypes, cropped to the detection box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Array, GraphError, Layer, LayerGraph, as_f32, run_graph
from .util import he_init, rng_for

P_ORDER = ("p3", "p4", "p5", "p6", "p7")
ASPECT_RATIOS = (1.0, 0.5, 2.0)
ANCHOR_SCALE = 2.0  # anchor side = scale * stride, capped at the image size


# --------------------------------------------------------------------------
# Graphs
# --------------------------------------------------------------------------

def build_protonet_graph(width: int, k: int, seed: int) -> LayerGraph:
    """Three 3x3 convs, one 2x upsample, and a 1x1 projection; ReLU outputs.

    The last 3x3 conv sits after the upsample so the prototypes carry true
    stride-4 detail; with it before, nearest upsampling plus a 1x1 would leave
    the masks blocky at stride 8.
    """
    rng = rng_for(seed, "protonet")
    params: dict[str, Array] = {}

    def conv_params(name: str, c_in: int, c_out: int, ksz: int):
        params[f"protonet.{name}.weight"] = he_init(rng, (c_out, c_in, ksz, ksz))
        params[f"protonet.{name}.bias"] = np.zeros(c_out, dtype=np.float32)
        return f"protonet.{name}.weight", f"protonet.{name}.bias"

    layers: list[Layer] = []
    prev = "p3"
    for i in range(2):
        wp = conv_params(f"conv{i}", width, width, 3)
        layers.append(Layer(f"conv{i}", "conv2d", (prev,), *wp, padding=1, tag="protonet"))
        layers.append(Layer(f"conv{i}.act", "relu", (f"conv{i}",), tag="protonet"))
        prev = f"conv{i}.act"
    layers.append(Layer("up", "upsample2x", (prev,), tag="protonet"))
    wp = conv_params("conv2", width, width, 3)
    layers.append(Layer("conv2", "conv2d", ("up",), *wp, padding=1, tag="protonet"))
    layers.append(Layer("conv2.act", "relu", ("conv2",), tag="protonet"))
    wp = conv_params("out", width, k, 1)
    layers.append(Layer("out", "conv1x1", ("conv2.act",), *wp, tag="protonet"))
    layers.append(Layer("protos", "relu", ("out",), tag="protonet"))
    return LayerGraph(("p3",), layers, params, ("protos",))


def build_predhead_graph(width: int, n_anchors: int, n_classes: int, k: int,
                         seed: int) -> LayerGraph:
    """Shared tower + class/box/coefficient branches applied to each P level.

    Also carries the 1x1 auxiliary semantic conv on P3 (training only; it is
    simply never requested at inference).
    """
    rng = rng_for(seed, "predhead")
    params: dict[str, Array] = {}

    def conv_params(name: str, c_in: int, c_out: int, ksz: int):
        params[f"predhead.{name}.weight"] = he_init(rng, (c_out, c_in, ksz, ksz))
        params[f"predhead.{name}.bias"] = np.zeros(c_out, dtype=np.float32)
        return f"predhead.{name}.weight", f"predhead.{name}.bias"

    tower = conv_params("tower", width, width, 3)
    cls = conv_params("cls", width, n_anchors * (n_classes + 1), 3)
    box = conv_params("box", width, n_anchors * 4, 3)
    coef = conv_params("coef", width, n_anchors * k, 3)
    aux = conv_params("aux", width, 1, 1)

    layers: list[Layer] = []
    outputs: list[str] = []
    for lvl in P_ORDER:
        layers.append(Layer(f"tower_{lvl}", "conv2d", (lvl,), *tower, padding=1, tag="predhead"))
        layers.append(Layer(f"tower_{lvl}.act", "relu", (f"tower_{lvl}",), tag="predhead"))
        for branch, wp in (("cls", cls), ("box", box), ("coef", coef)):
            layers.append(Layer(f"{branch}_{lvl}", "conv2d", (f"tower_{lvl}.act",), *wp,
                                padding=1, tag="predhead"))
            outputs.append(f"{branch}_{lvl}")
    layers.append(Layer("aux", "conv1x1", ("p3",), *aux, tag="predhead"))
    outputs.append("aux")
    return LayerGraph(tuple(P_ORDER), layers, params, tuple(outputs))


# --------------------------------------------------------------------------
# Anchors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # [N,4] normalized (cx,cy,w,h)
    level_ranges: dict[str, tuple[int, int]]
    level_hw: dict[str, tuple[int, int]]

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


def build_anchors(input_hw: tuple[int, int], level_hw: dict[str, tuple[int, int]],
                  strides: dict[str, int], ratios=ASPECT_RATIOS,
                  scale: float = ANCHOR_SCALE) -> AnchorSet:
    img_h, img_w = input_hw
    boxes = []
    ranges: dict[str, tuple[int, int]] = {}
    for lvl in P_ORDER:
        h, w = level_hw[lvl]
        stride = strides[lvl]
        base = min(scale * stride, float(min(img_h, img_w)))
        start = sum(b.shape[0] for b in boxes) if boxes else 0
        cell = np.zeros((h, w, len(ratios), 4), dtype=np.float32)
        cols = (np.arange(w, dtype=np.float32) + 0.5) * stride / img_w
        rows = (np.arange(h, dtype=np.float32) + 0.5) * stride / img_h
        cell[..., 0] = cols[None, :, None]
        cell[..., 1] = rows[:, None, None]
        for ri, r in enumerate(ratios):
            cell[:, :, ri, 2] = min(base * np.sqrt(r) / img_w, 1.0)
            cell[:, :, ri, 3] = min(base / np.sqrt(r) / img_h, 1.0)
        flat = cell.reshape(-1, 4)
        boxes.append(flat)
        ranges[lvl] = (start, start + flat.shape[0])
    return AnchorSet(boxes=np.concatenate(boxes, axis=0), level_ranges=ranges,
                     level_hw=dict(level_hw))


# --------------------------------------------------------------------------
# Forward helpers
# --------------------------------------------------------------------------

@dataclass
class RawPredictions:
    """Per-anchor raw head outputs, flattened across levels in anchor order."""

    cls_logits: Array   # [N, n_classes+1]
    box_offsets: Array  # [N, 4]
    coefs: Array        # [N, k] pre-tanh
    level_hw: dict[str, tuple[int, int]]
    n_anchors_per_cell: int


def _flatten_level(x: Array, n_anchors: int) -> Array:
    """[A*C, h, w] -> [h*w*A, C] matching anchor enumeration order."""
    ac, h, w = x.shape
    c = ac // n_anchors
    return x.reshape(n_anchors, c, h, w).transpose(2, 3, 0, 1).reshape(h * w * n_anchors, c)


def unflatten_level(g: Array, hw: tuple[int, int], n_anchors: int) -> Array:
    """Inverse of _flatten_level for gradient scatter."""
    h, w = hw
    c = g.shape[1]
    return np.ascontiguousarray(
        g.reshape(h, w, n_anchors, c).transpose(2, 3, 0, 1).reshape(n_anchors * c, h, w))


def raw_from_outputs(out: dict[str, Array], n_anchors: int = len(ASPECT_RATIOS)
                     ) -> RawPredictions:
    """Flatten per-level head outputs into per-anchor arrays, P3..P7 order."""
    cls_parts, box_parts, coef_parts = [], [], []
    level_hw = {}
    for lvl in P_ORDER:
        level_hw[lvl] = out[f"cls_{lvl}"].shape[1:]
        cls_parts.append(_flatten_level(out[f"cls_{lvl}"], n_anchors))
        box_parts.append(_flatten_level(out[f"box_{lvl}"], n_anchors))
        coef_parts.append(_flatten_level(out[f"coef_{lvl}"], n_anchors))
    return RawPredictions(
        cls_logits=np.concatenate(cls_parts, axis=0),
        box_offsets=np.concatenate(box_parts, axis=0),
        coefs=np.concatenate(coef_parts, axis=0),
        level_hw=level_hw,
        n_anchors_per_cell=n_anchors,
    )


def predhead_forward(graph: LayerGraph, pyramid, n_classes: int, k: int,
                     n_anchors: int = len(ASPECT_RATIOS), with_aux: bool = False):
    """Run the shared head over P3-P7 and flatten to per-anchor arrays."""
    missing = [lvl.upper() for lvl in P_ORDER if lvl.upper() not in pyramid.levels]
    if missing:
        raise GraphError(f"prediction head requires all P levels; missing {missing}")
    feeds = {lvl: pyramid.levels[lvl.upper()] for lvl in P_ORDER}
    wanted = [f"{b}_{lvl}" for lvl in P_ORDER for b in ("cls", "box", "coef")]
    if with_aux:
        wanted.append("aux")
    out = run_graph(graph, feeds, outputs=tuple(wanted))
    raw = raw_from_outputs(out, n_anchors)
    return (raw, out["aux"]) if with_aux else raw


def protonet_forward(graph: LayerGraph, p3: Array) -> Array:
    """Prototype masks [k, h_p, w_p] from P3 (stride 8 -> stride 4)."""
    return run_graph(graph, {"p3": as_f32(p3)})["protos"]


# --------------------------------------------------------------------------
# Boxes, detections, NMS
# --------------------------------------------------------------------------

def decode_boxes(offsets: Array, anchors: Array) -> Array:
    """SSD-style decode with unit variances: center offsets plus log sizes."""
    out = np.empty_like(anchors)
    out[:, 0] = anchors[:, 0] + offsets[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + offsets[:, 1] * anchors[:, 3]
    out[:, 2] = anchors[:, 2] * np.exp(np.clip(offsets[:, 2], -6.0, 6.0))
    out[:, 3] = anchors[:, 3] * np.exp(np.clip(offsets[:, 3], -6.0, 6.0))
    return out


def encode_boxes(boxes: Array, anchors: Array) -> Array:
    out = np.empty_like(boxes)
    out[:, 0] = (boxes[:, 0] - anchors[:, 0]) / anchors[:, 2]
    out[:, 1] = (boxes[:, 1] - anchors[:, 1]) / anchors[:, 3]
    out[:, 2] = np.log(boxes[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(boxes[:, 3] / anchors[:, 3])
    return out


def _to_corners(boxes: Array) -> Array:
    c = np.empty_like(boxes)
    c[:, 0] = boxes[:, 0] - boxes[:, 2] / 2
    c[:, 1] = boxes[:, 1] - boxes[:, 3] / 2
    c[:, 2] = boxes[:, 0] + boxes[:, 2] / 2
    c[:, 3] = boxes[:, 1] + boxes[:, 3] / 2
    return c


def box_iou_matrix(a: Array, b: Array) -> Array:
    """Pairwise IoU of (cx,cy,w,h) boxes: result [len(a), len(b)]."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float32)
    ca, cb = _to_corners(a), _to_corners(b)
    x0 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y0 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x1 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y1 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0).astype(np.float32)


def softmax(logits: Array, axis: int = -1) -> Array:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Detection:
    class_id: int      # foreground class, 1..n_classes
    score: float
    box: Array         # (cx,cy,w,h) normalized
    coefficients: Array  # [k], tanh-bounded
    anchor_index: int = -1


def nms(detections: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Class-agnostic greedy NMS: score-descending with index tie-break."""
    if not detections:
        return []
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    boxes = np.stack([d.box for d in detections])
    kept: list[int] = []
    for i in order:
        if kept:
            iou = box_iou_matrix(boxes[i][None], boxes[kept])
            if iou.max() >= iou_thresh:
                continue
        kept.append(i)
    return [detections[i] for i in sorted(kept)]


PRE_NMS_TOP_K = 200


def detections_from_raw(raw: RawPredictions, anchors: AnchorSet,
                        score_thresh: float = 0.05, nms_iou: float = 0.5,
                        top_k: int = 20) -> list[Detection]:
    scores = softmax(raw.cls_logits, axis=1)
    boxes = decode_boxes(raw.box_offsets, anchors.boxes)
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, 1.0)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, 1.0)
    boxes[:, 2] = np.clip(boxes[:, 2], 1e-4, 1.0)
    boxes[:, 3] = np.clip(boxes[:, 3], 1e-4, 1.0)
    coefs = np.tanh(raw.coefs)
    fg = scores[:, 1:]
    idx_anchor, idx_cls = np.nonzero(fg > score_thresh)
    cand_scores = fg[idx_anchor, idx_cls]
    if idx_anchor.size > PRE_NMS_TOP_K:
        # keep the highest-scoring candidates; (-score, anchor, class) order
        order = np.lexsort((idx_cls, idx_anchor, -cand_scores))[:PRE_NMS_TOP_K]
        idx_anchor, idx_cls = idx_anchor[order], idx_cls[order]
        cand_scores = cand_scores[order]
    candidates = [
        Detection(class_id=int(c) + 1, score=float(s), box=boxes[a].copy(),
                  coefficients=coefs[a].copy(), anchor_index=int(a))
        for a, c, s in zip(idx_anchor.tolist(), idx_cls.tolist(), cand_scores.tolist())
    ]
    survivors = nms(candidates, nms_iou)
    survivors.sort(key=lambda d: (-d.score, d.anchor_index))
    return survivors[:top_k]


# --------------------------------------------------------------------------
# Mask assembly
# --------------------------------------------------------------------------

@dataclass
class InstanceMask:
    mask: np.ndarray  # bool, prototype resolution
    detection: Detection


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float32)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def crop_rect(box: Array, hw: tuple[int, int]) -> tuple[int, int, int, int]:
    """Integer pixel rect (x0, y0, x1, y1), end-exclusive, clipped to the grid."""
    h, w = hw
    x0 = int(np.floor((box[0] - box[2] / 2) * w))
    x1 = int(np.ceil((box[0] + box[2] / 2) * w))
    y0 = int(np.floor((box[1] - box[3] / 2) * h))
    y1 = int(np.ceil((box[1] + box[3] / 2) * h))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(max(x1, x0 + 1), w), min(max(y1, y0 + 1), h)
    return x0, y0, x1, y1


def assemble_masks(protos: Array, detections: list[Detection]) -> list[InstanceMask]:
    """mask = sigmoid(sum_i coef_i * proto_i), cropped to the box, > 0.5."""
    k, h, w = protos.shape
    out = []
    flat = protos.reshape(k, -1)
    for det in detections:
        if det.coefficients.shape[0] != k:
            raise GraphError(
                f"detection carries {det.coefficients.shape[0]} coefficients, "
                f"prototypes expect {k}")
        logits = (det.coefficients @ flat).reshape(h, w)
        mask = sigmoid(logits) > 0.5  # strict: exact 0.5 stays background
        x0, y0, x1, y1 = crop_rect(det.box, (h, w))
        cropped = np.zeros_like(mask)
        cropped[y0:y1, x0:x1] = mask[y0:y1, x0:x1]
        out.append(InstanceMask(mask=cropped, detection=det))
    return out


def mask_to_image_res(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    return np.repeat(np.repeat(mask, factor, axis=0), factor, axis=1)
