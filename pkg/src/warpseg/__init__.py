"""warpseg: keyframe feature propagation for toy video instance segmentation,
plus an emulated mixed-precision quantization toolkit."""

__version__ = "0.1.0"

from .backbone import BackboneSpec, FeaturePyramid, backbone_forward, fpn_forward
from .costmodel import CostReport, resnet101_cost_model, toy_cost_model
from .flownet import FlowField, FlowNetConfig, epe_loss, flow_forward
from .graph import FlopCounter, Layer, LayerGraph, count_flops, graph_backward, run_graph
from .head import Detection, InstanceMask, assemble_masks
from .metrics import evaluate_ap
from .model import SegModel, build_model, load_model
from .numerics import QuantizedTensor, fp16_emulate, int8_dequantize, int8_quantize
from .pipeline import FrameResult, KeyframeSchedule, benchmark, keyframe_flags, run_video
from .quantize import (CalibrationHistogram, PrecisionConfig, apply_precision,
                       calibrate_scales, collect_histogram, kl_calibrate,
                       search_precision)
from .synthdata import SceneSpec, VideoSample, gen_flow_pairs, gen_video
from .warp import KeyframeCache, inverse_warp, partial_transform, scale_flow
