"""The standard three-stage training recipe with its frozen scene settings.

Stage 1 trains the segmentation model on single frames, stage 2 trains the
flow estimator against the frozen backbone, stage 3 adapts the box branch to
warped pyramids. All randomness derives from one master seed, so a recipe run
is reproducible end to end.
"""
from __future__ import annotations

from dataclasses import replace

from .model import SegModel, build_model
from .synthdata import SceneSpec, VideoSample, gen_flow_pairs, gen_video
from .training import samples_from_videos, train_flow, train_seg, train_warp_finetune
from .util import derive_seed

# Shapes span the P3/P4 anchor bands so both computed and warped features
# carry detections; 8-frame clips keep placement feasible for fast instances.
TRAIN_SPEC = SceneSpec(frames=8, size_min=7, size_max=15)
# The flow-utility benchmark uses single larger instances in longer clips:
# small shapes ride the computed-C3 path and dilute the warping signal.
BENCH_SPEC = SceneSpec(frames=15, size_min=10, size_max=13, min_speed=2,
                       max_instances=1)

N_TRAIN_VIDEOS = 48
N_FLOW_PAIRS = 512
FLOW_MAX_SHIFT = 12  # px; covers keyframe distances 1..4 at max speed
N_FT_VIDEOS = 24
SEG_STEPS = 3000
FLOW_STEPS = 3000
REFINE_STEPS = 400


def train_videos(seed: int, count: int = N_TRAIN_VIDEOS,
                 spec: SceneSpec = TRAIN_SPEC) -> list[VideoSample]:
    return [gen_video(derive_seed(seed, "train", i), spec) for i in range(count)]


def validation_videos(seed: int, count: int = 8,
                      spec: SceneSpec = TRAIN_SPEC) -> list[VideoSample]:
    return [gen_video(derive_seed(seed, "val", i), spec) for i in range(count)]


def calibration_frames(seed: int, count: int = 100,
                       spec: SceneSpec = TRAIN_SPEC) -> list:
    videos = [gen_video(derive_seed(seed, "calib", i), spec)
              for i in range(count // spec.frames + 1)]
    return [f for v in videos for f in v.frames][:count]


def benchmark_videos(seed: int, count: int = 16,
                     spec: SceneSpec = BENCH_SPEC) -> list[VideoSample]:
    return [gen_video(derive_seed(seed, "flow-bench", i), spec) for i in range(count)]


def train_full_model(seed: int = 0, seg_steps: int = SEG_STEPS,
                     flow_steps: int = FLOW_STEPS, refine_steps: int = REFINE_STEPS,
                     n_videos: int = N_TRAIN_VIDEOS, n_pairs: int = N_FLOW_PAIRS
                     ) -> SegModel:
    """Run all three training stages and return the trained model."""
    model = build_model(seed=seed)
    videos = train_videos(seed, n_videos)
    train_seg(model, samples_from_videos(videos), steps=seg_steps, seed=seed)
    pairs = gen_flow_pairs(derive_seed(seed, "flow"), n_pairs, model.backbone,
                           TRAIN_SPEC, max_shift=FLOW_MAX_SHIFT)
    train_flow(model, pairs, steps=flow_steps, seed=seed)
    if refine_steps:
        ft_videos = [gen_video(derive_seed(seed, "warp-ft", i),
                               replace(TRAIN_SPEC, min_speed=1))
                     for i in range(N_FT_VIDEOS)]
        train_warp_finetune(model, ft_videos, steps=refine_steps, seed=seed)
    return model
