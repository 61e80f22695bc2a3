"""SGD training loops for the segmentation model and the flow estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flownet import FlowField, epe_loss_grad
from .graph import Array, GraphError, graph_backward, run_graph
from .head import P_ORDER, raw_from_outputs, unflatten_level
from .losses import LOSS_WEIGHTS, segmentation_losses
from .model import SegModel
from .synthdata import FlowPair, VideoSample
from .util import rng_for

MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4


class TrainingDiverged(RuntimeError):
    pass


class SGD:
    """SGD with momentum and weight decay; updates parameter arrays in place."""

    def __init__(self, params: dict[str, Array], momentum: float = MOMENTUM,
                 weight_decay: float = WEIGHT_DECAY):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: dict[str, Array], lr: float) -> None:
        for name, g in grads.items():
            p = self.params[name]
            v = self.velocity[name]
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= lr * v


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup: int = 0) -> float:
    """Cosine decay over the run, with an optional linear warmup prefix."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


def clip_grads(grads: dict[str, Array], max_norm: float) -> dict[str, Array]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = np.float32(max_norm / total)
    return {name: g * scale for name, g in grads.items()}


# --------------------------------------------------------------------------
# Flow training
# --------------------------------------------------------------------------

def train_flow(model: SegModel, pairs: list[FlowPair], steps: int, base_lr: float = 0.05,
               batch_size: int = 8, seed: int = 0,
               momentum: float = MOMENTUM, weight_decay: float = WEIGHT_DECAY,
               warmup: int = 50, clip_norm: float = 5.0
               ) -> list[tuple[int, float]]:
    """Train the flow net on (c3_key, c3_cur, gt_flow) pairs; backbone frozen.

    Returns the per-step (step, epe) trace; parameters update in place.
    """
    if not pairs:
        raise ValueError("flow training needs a non-empty dataset")
    graph = model.flownet
    opt = SGD(graph.params, momentum, weight_decay)
    rng = rng_for(seed, "train-flow")
    trace: list[tuple[int, float]] = []
    for step in range(steps):
        lr = cosine_lr(base_lr, step, steps, warmup)
        idx = rng.integers(0, len(pairs), size=batch_size)
        grads: dict[str, Array] = {}
        epe_sum = 0.0
        for i in idx.tolist():
            pair = pairs[i]
            out, tape = run_graph(graph, {"c3_key": pair.c3_key, "c3_cur": pair.c3_cur},
                                  record_tape=True)
            pred = FlowField(values=out["flow"], stride=8)
            epe, d_flow = epe_loss_grad(pred, pair.gt)
            epe_sum += epe
            pg, _ = graph_backward(graph, tape, {"flow": d_flow})
            for name, g in pg.items():
                grads[name] = grads.get(name, 0) + g
        epe_mean = epe_sum / batch_size
        if not math.isfinite(epe_mean):
            raise TrainingDiverged(f"flow training diverged at step {step}: epe={epe_mean}")
        opt.step(clip_grads({n: g / batch_size for n, g in grads.items()}, clip_norm), lr)
        trace.append((step, epe_mean))
    return trace


def mean_flow_epe(model: SegModel, pairs: list[FlowPair]) -> float:
    """Mean EPE of the current flow net over a pair set, in stride-8 cells."""
    from .flownet import epe_loss, flow_forward
    total = 0.0
    for pair in pairs:
        pred = flow_forward(model.flownet, pair.c3_key, pair.c3_cur)
        total += epe_loss(pred, pair.gt)
    return total / len(pairs)


# --------------------------------------------------------------------------
# Segmentation training
# --------------------------------------------------------------------------

@dataclass
class SegSample:
    image: Array
    boxes: Array           # [n,4] normalized cxcywh
    classes: np.ndarray    # [n] in 1..num_classes
    masks: list[np.ndarray]  # per instance, bool, image resolution
    occupancy: np.ndarray


def samples_from_videos(videos: list[VideoSample]) -> list[SegSample]:
    out = []
    for v in videos:
        for t in range(v.n_frames):
            out.append(SegSample(image=v.frames[t], boxes=v.boxes[t], classes=v.classes,
                                 masks=v.masks[t], occupancy=v.occupancy(t)))
    return out


def _forward_backward(model: SegModel, sample: SegSample) -> tuple[dict, dict[str, Array]]:
    """One taped pass through backbone/fpn/heads plus the loss gradients."""
    bb_out, bb_tape = run_graph(model.backbone, {"image": sample.image},
                                outputs=("c1", "c2", "c3", "c4", "c5"), record_tape=True)
    fpn_feeds = {"c3": bb_out["c3"], "c4": bb_out["c4"], "c5": bb_out["c5"]}
    fpn_out, fpn_tape = run_graph(model.fpn, fpn_feeds, record_tape=True)
    proto_out, proto_tape = run_graph(model.protonet, {"p3": fpn_out["p3"]},
                                      record_tape=True)
    head_feeds = {lvl: fpn_out[lvl] for lvl in P_ORDER}
    head_out, head_tape = run_graph(model.predhead, head_feeds, record_tape=True)
    raw = raw_from_outputs(head_out)
    n_anchors = raw.n_anchors_per_cell

    anchors = model.anchors_for((sample.image.shape[1], sample.image.shape[2]))
    bundle = segmentation_losses(raw, proto_out["protos"], head_out["aux"], anchors.boxes,
                                 sample.boxes, sample.classes, sample.masks,
                                 sample.occupancy)

    # Scatter flat per-anchor gradients back onto the per-level head outputs.
    head_grads: dict[str, Array] = {"aux": bundle.grad_aux}
    offset = 0
    for lvl in P_ORDER:
        h, w = raw.level_hw[lvl]
        n = h * w * n_anchors
        sl = slice(offset, offset + n)
        head_grads[f"cls_{lvl}"] = unflatten_level(bundle.grad_cls[sl], (h, w), n_anchors)
        head_grads[f"box_{lvl}"] = unflatten_level(bundle.grad_box[sl], (h, w), n_anchors)
        head_grads[f"coef_{lvl}"] = unflatten_level(bundle.grad_coef[sl], (h, w), n_anchors)
        offset += n

    head_pg, head_leaf = graph_backward(model.predhead, head_tape, head_grads)
    proto_pg, proto_leaf = graph_backward(model.protonet, proto_tape,
                                          {"protos": bundle.grad_protos})
    fpn_grads = {lvl: head_leaf[lvl] for lvl in P_ORDER if lvl in head_leaf}
    fpn_grads["p3"] = fpn_grads.get("p3", 0) + proto_leaf["p3"]
    fpn_pg, fpn_leaf = graph_backward(model.fpn, fpn_tape,
                                      {k: v for k, v in fpn_grads.items()})
    bb_grads = {name: fpn_leaf[name] for name in ("c3", "c4", "c5") if name in fpn_leaf}
    bb_pg, _ = graph_backward(model.backbone, bb_tape, bb_grads)

    grads: dict[str, Array] = {}
    for pg in (head_pg, proto_pg, fpn_pg, bb_pg):
        for name, g in pg.items():
            grads[name] = grads.get(name, 0) + g
    return {"loss": bundle.total, **bundle.values}, grads


def _forward_backward_warped(model: SegModel, video: VideoSample, key_t: int,
                             cur_t: int, exact_flow: bool = True
                             ) -> tuple[dict, dict[str, Array]]:
    """Loss pass over a warped non-keyframe pyramid (stage-3 style).

    The backbone and flow net stay frozen; gradients reach the prediction
    head, prototype net, and the FPN convs that execute on the partial path
    (lateral3/smooth3/down6/down7). Warped P4/P5 enter as constants.

    With ``exact_flow`` the warp uses the generator's ground truth, so the
    heads adapt to interpolation blur without also learning to suppress the
    displaced stale features an imperfect flow leaves behind.
    """
    from .flownet import flow_forward
    from .synthdata import keyward_flow, pool_flow_to_stride
    from .warp import inverse_warp, scale_flow

    key_pyr = run_graph(model.backbone, {"image": video.frames[key_t]},
                        outputs=("c3", "c4", "c5"))
    key_fpn = run_graph(model.fpn, key_pyr)
    c3_cur = run_graph(model.backbone, {"image": video.frames[cur_t]},
                       outputs=("c3",))["c3"]
    if exact_flow:
        flow = pool_flow_to_stride(keyward_flow(video, key_t, cur_t), 8)
    else:
        flow = flow_forward(model.flownet, key_pyr["c3"], c3_cur)
    w4 = inverse_warp(key_fpn["p4"], scale_flow(flow, 16))
    w5 = inverse_warp(key_fpn["p5"], scale_flow(flow, 32))

    fpn_feeds = {"c3": c3_cur, "p4": w4, "p5": w5}
    fpn_out, fpn_tape = run_graph(model.fpn, fpn_feeds, outputs=("p3", "p6", "p7"),
                                  record_tape=True)
    pyr = {"p3": fpn_out["p3"], "p4": w4, "p5": w5, "p6": fpn_out["p6"],
           "p7": fpn_out["p7"]}
    proto_out, proto_tape = run_graph(model.protonet, {"p3": pyr["p3"]},
                                      record_tape=True)
    head_out, head_tape = run_graph(model.predhead, pyr, record_tape=True)
    raw = raw_from_outputs(head_out)
    n_anchors = raw.n_anchors_per_cell

    anchors = model.anchors_for((video.spec.canvas, video.spec.canvas))
    bundle = segmentation_losses(raw, proto_out["protos"], head_out["aux"],
                                 anchors.boxes, video.boxes[cur_t], video.classes,
                                 video.masks[cur_t], video.occupancy(cur_t))

    head_grads: dict[str, Array] = {"aux": bundle.grad_aux}
    offset = 0
    for lvl in P_ORDER:
        h, w = raw.level_hw[lvl]
        n = h * w * n_anchors
        sl = slice(offset, offset + n)
        head_grads[f"cls_{lvl}"] = unflatten_level(bundle.grad_cls[sl], (h, w), n_anchors)
        head_grads[f"box_{lvl}"] = unflatten_level(bundle.grad_box[sl], (h, w), n_anchors)
        head_grads[f"coef_{lvl}"] = unflatten_level(bundle.grad_coef[sl], (h, w), n_anchors)
        offset += n
    head_pg, head_leaf = graph_backward(model.predhead, head_tape, head_grads)
    proto_pg, proto_leaf = graph_backward(model.protonet, proto_tape,
                                          {"protos": bundle.grad_protos})
    fpn_grads = {"p3": head_leaf["p3"] + proto_leaf["p3"]}
    for lvl in ("p6", "p7"):
        if lvl in head_leaf:
            fpn_grads[lvl] = head_leaf[lvl]
    fpn_pg, _ = graph_backward(model.fpn, fpn_tape, fpn_grads)

    grads: dict[str, Array] = {}
    for pg in (head_pg, proto_pg, fpn_pg):
        for name, g in pg.items():
            grads[name] = grads.get(name, 0) + g
    return {"loss": bundle.total, **bundle.values}, grads


def train_warp_finetune(model: SegModel, videos: list[VideoSample], steps: int = 400,
                        base_lr: float = 1e-3, batch_size: int = 4, seed: int = 0,
                        interval: int = 5, momentum: float = MOMENTUM,
                        weight_decay: float = WEIGHT_DECAY, warmup: int = 20,
                        clip_norm: float = 5.0, log_every: int = 0) -> list[dict]:
    """Adapt the box-regression branch to warped non-keyframe pyramids.

    Half of each batch comes from exact-flow warped pairs, half from regular
    full-compute frames, so the keyframe path keeps its behavior. Only the
    box branch updates: touching the classification tower teaches the model
    to suppress warp artifacts, which hurts the flow-assisted path more than
    it helps; box blur is the actual accuracy bottleneck at this scale.
    """
    if not videos:
        raise ValueError("warp fine-tuning needs a non-empty dataset")
    params = {name: p for name, p in model.predhead.params.items() if ".box." in name}
    opt = SGD(params, momentum, weight_decay)
    rng = rng_for(seed, "train-warp")
    seg_samples = samples_from_videos(videos)
    trace: list[dict] = []
    for step in range(steps):
        lr = cosine_lr(base_lr, step, steps, warmup)
        grads: dict[str, Array] = {}
        stats: dict[str, float] = {}
        for b in range(batch_size):
            if b % 2 == 0:
                video = videos[int(rng.integers(0, len(videos)))]
                n_keys = max(1, (video.n_frames - 1) // interval)
                key_t = int(rng.integers(0, n_keys)) * interval
                max_cur = min(key_t + interval - 1, video.n_frames - 1)
                cur_t = int(rng.integers(key_t + 1, max_cur + 1)) if max_cur > key_t \
                    else key_t
                if cur_t == key_t:
                    values, g = _forward_backward(model, seg_samples[0])
                else:
                    values, g = _forward_backward_warped(model, video, key_t, cur_t)
            else:
                si = int(rng.integers(0, len(seg_samples)))
                values, g = _forward_backward(model, seg_samples[si])
            for name, v in values.items():
                stats[name] = stats.get(name, 0.0) + v / batch_size
            for name, gv in g.items():
                if name in params:  # everything outside the box branch stays frozen
                    grads[name] = grads.get(name, 0) + gv
        if not math.isfinite(stats["loss"]):
            raise TrainingDiverged(f"warp fine-tuning diverged at step {step}: {stats}")
        opt.step(clip_grads({n: g / batch_size for n, g in grads.items()}, clip_norm), lr)
        trace.append({"step": step, "lr": lr, **stats})
        if log_every and step % log_every == 0:
            print(f"warp-ft step {step:4d} " +
                  " ".join(f"{k} {v:.4f}" for k, v in stats.items()))
    return trace


def train_seg(model: SegModel, samples: list[SegSample], steps: int,
              base_lr: float = 0.01, batch_size: int = 4, seed: int = 0,
              momentum: float = MOMENTUM, weight_decay: float = WEIGHT_DECAY,
              warmup: int = 100, clip_norm: float = 5.0,
              log_every: int = 0) -> list[dict]:
    """Joint loss cls + 1.5*box + 6.125*mask + aux with SGD and cosine decay."""
    if not samples:
        raise ValueError("segmentation training needs a non-empty dataset")
    params: dict[str, Array] = {}
    for graph in (model.backbone, model.fpn, model.protonet, model.predhead):
        params.update(graph.params)
    opt = SGD(params, momentum, weight_decay)
    rng = rng_for(seed, "train-seg")
    trace: list[dict] = []
    for step in range(steps):
        lr = cosine_lr(base_lr, step, steps, warmup)
        idx = rng.integers(0, len(samples), size=batch_size)
        grads: dict[str, Array] = {}
        stats: dict[str, float] = {}
        for i in idx.tolist():
            values, g = _forward_backward(model, samples[i])
            for name, v in values.items():
                stats[name] = stats.get(name, 0.0) + v / batch_size
            for name, gv in g.items():
                grads[name] = grads.get(name, 0) + gv
        if not math.isfinite(stats["loss"]):
            raise TrainingDiverged(f"segmentation training diverged at step {step}: "
                                   f"{stats}")
        opt.step(clip_grads({n: g / batch_size for n, g in grads.items()}, clip_norm), lr)
        row = {"step": step, "lr": lr, **stats}
        trace.append(row)
        if log_every and step % log_every == 0:
            print(f"step {step:5d} lr {lr:.4f} " +
                  " ".join(f"{k} {v:.4f}" for k, v in stats.items()))
    return trace
