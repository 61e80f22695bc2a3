"""Video orchestration: keyframe scheduling, partial computation, benchmarking.

Keyframes run the full backbone and FPN and refresh the feature cache;
non-keyframes compute only C1-C3, estimate flow against the cached keyframe
C3, and assemble their pyramid by warping the cached P4/P5. Per-frame conv
FLOPs are charged through the instrumented counter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import backbone_forward, fpn_forward
from .flownet import flow_forward
from .graph import Array, FlopCounter, count_flops
from .head import (Detection, assemble_masks, detections_from_raw, mask_to_image_res,
                   predhead_forward, protonet_forward)
from .metrics import APResult, GtRecord, PredRecord, evaluate_ap
from .model import SegModel
from .quantize import PrecisionConfig, apply_precision
from .synthdata import VideoSample
from .warp import DEFAULT_WARP_LAYERS, KeyframeCache, partial_transform, zero_flow


@dataclass(frozen=True)
class KeyframeSchedule:
    """Fixed-interval policy: frame i is a keyframe iff i % interval == 0."""

    interval: int = 5

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"keyframe interval must be >= 1, got {self.interval}")


def keyframe_flags(n_frames: int, schedule: KeyframeSchedule) -> list[bool]:
    if n_frames < 1:
        raise ValueError("need at least one frame")
    return [i % schedule.interval == 0 for i in range(n_frames)]


@dataclass
class FrameResult:
    frame_index: int
    is_keyframe: bool
    detections: list[Detection]
    masks: list[np.ndarray]  # bool, image resolution
    flops_by_stage: dict[str, int]
    cache_key_index: int

    @property
    def total_flops(self) -> int:
        return sum(self.flops_by_stage.values())


def run_video(model: SegModel, frames: list[Array],
              schedule: KeyframeSchedule = KeyframeSchedule(),
              precision: PrecisionConfig | None = None,
              calibration: dict[str, float] | None = None,
              use_flow: bool = True, warp_layers: frozenset = DEFAULT_WARP_LAYERS,
              score_thresh: float = 0.3, nms_iou: float = 0.5, top_k: int = 10
              ) -> list[FrameResult]:
    """Process a frame sequence under the keyframe schedule."""
    if not frames:
        raise ValueError("empty frame sequence")
    if precision is not None:
        model = apply_precision(model, precision, calibration)

    results: list[FrameResult] = []
    cache: KeyframeCache | None = None
    flags = keyframe_flags(len(frames), schedule)
    keep_p3 = "P3" in warp_layers
    for i, (frame, is_key) in enumerate(zip(frames, flags)):
        counter = FlopCounter()
        with count_flops(counter):
            if is_key:
                pyramid = backbone_forward(model.backbone, frame, "C5")
                pyramid = fpn_forward(model.fpn, pyramid)
                cache = KeyframeCache(
                    c3=pyramid["C3"], p4=pyramid["P4"], p5=pyramid["P5"],
                    frame_index=i, p3=pyramid["P3"] if keep_p3 else None)
            else:
                partial = backbone_forward(model.backbone, frame, "C3")
                c3_cur = partial["C3"]
                if use_flow:
                    flow = flow_forward(model.flownet, cache.c3, c3_cur)
                else:
                    flow = zero_flow(*c3_cur.shape[1:])
                pyramid = partial_transform(cache, c3_cur, flow, model.fpn, warp_layers)
            protos = protonet_forward(model.protonet, pyramid["P3"])
            raw = predhead_forward(model.predhead, pyramid, model.num_classes,
                                   model.num_prototypes)
            anchors = model.anchors_for(pyramid.input_hw)
            dets = detections_from_raw(raw, anchors, score_thresh, nms_iou, top_k)
            inst = assemble_masks(protos, dets)
        factor = pyramid.input_hw[0] // protos.shape[1]
        masks = [mask_to_image_res(m.mask, factor) for m in inst]
        results.append(FrameResult(
            frame_index=i, is_keyframe=is_key, detections=dets, masks=masks,
            flops_by_stage=counter.flops(), cache_key_index=cache.frame_index))
    return results


# --------------------------------------------------------------------------
# Evaluation plumbing
# --------------------------------------------------------------------------

def records_from_results(videos: list[VideoSample], results: list[list[FrameResult]]
                         ) -> tuple[list[PredRecord], list[GtRecord]]:
    preds: list[PredRecord] = []
    gts: list[GtRecord] = []
    frame_id = 0
    for video, video_results in zip(videos, results):
        for t, fr in enumerate(video_results):
            for det, mask in zip(fr.detections, fr.masks):
                preds.append(PredRecord(frame_id=frame_id, class_id=det.class_id,
                                        score=det.score, box=det.box, mask=mask))
            for cls, box, mask in zip(video.classes.tolist(), video.boxes[t],
                                      video.masks[t]):
                gts.append(GtRecord(frame_id=frame_id, class_id=int(cls), box=box,
                                    mask=mask))
            frame_id += 1
    return preds, gts


def evaluate_videos(model: SegModel, videos: list[VideoSample],
                    schedule: KeyframeSchedule = KeyframeSchedule(),
                    **kwargs) -> tuple[APResult, list[list[FrameResult]]]:
    results = [run_video(model, v.frames, schedule, **kwargs) for v in videos]
    preds, gts = records_from_results(videos, results)
    return evaluate_ap(preds, gts), results


def evaluate_images(model: SegModel, videos: list[VideoSample], **kwargs) -> APResult:
    """Frame-independent evaluation: every frame processed as a keyframe."""
    ap, _ = evaluate_videos(model, videos, KeyframeSchedule(interval=1), **kwargs)
    return ap


# --------------------------------------------------------------------------
# Benchmark grid
# --------------------------------------------------------------------------

@dataclass
class BenchmarkRow:
    interval: int
    config_name: str
    use_flow: bool
    mask_ap: float
    box_ap: float
    mean_flops_per_frame: float
    backbone_flops_per_frame: float

    def to_record(self) -> dict:
        return {
            "interval": self.interval,
            "config": self.config_name,
            "use_flow": self.use_flow,
            "mask_ap": round(self.mask_ap, 6),
            "box_ap": round(self.box_ap, 6),
            "mean_flops_per_frame": self.mean_flops_per_frame,
            "backbone_flops_per_frame": self.backbone_flops_per_frame,
        }


BACKBONE_STAGES = ("C1", "C2", "C3", "C4", "C5")


def benchmark(model: SegModel, videos: list[VideoSample],
              schedules: list[KeyframeSchedule],
              precision_cases: list[tuple[str, PrecisionConfig | None, dict | None]],
              flow_cases: tuple[bool, ...] = (True,), **kwargs) -> list[BenchmarkRow]:
    """AP and FLOP accounting for every (schedule, precision, flow) cell."""
    rows: list[BenchmarkRow] = []
    for schedule in schedules:
        for name, config, scales in precision_cases:
            for use_flow in flow_cases:
                ap, results = evaluate_videos(model, videos, schedule,
                                              precision=config, calibration=scales,
                                              use_flow=use_flow, **kwargs)
                frames = [fr for rs in results for fr in rs]
                mean_flops = float(np.mean([fr.total_flops for fr in frames]))
                backbone = float(np.mean(
                    [sum(fr.flops_by_stage.get(s, 0) for s in BACKBONE_STAGES)
                     for fr in frames]))
                rows.append(BenchmarkRow(
                    interval=schedule.interval, config_name=name, use_flow=use_flow,
                    mask_ap=ap.mask_ap, box_ap=ap.box_ap,
                    mean_flops_per_frame=mean_flops,
                    backbone_flops_per_frame=backbone))
    return rows
