"""Bilinear inverse warping and the partial pyramid transform.

On non-keyframes only C1-C3 run; P4/P5 come from the cached keyframe pyramid
warped by the estimated flow, P6/P7 are re-derived from warped P5, and P3 is
assembled from the freshly computed C3 plus upsampled warped P4 using the
same FPN parameters as the keyframe path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import LEVEL_STRIDES, FeaturePyramid
from .flownet import FlowField
from .graph import Array, GraphError, LayerGraph, as_f32, run_graph

DEFAULT_WARP_LAYERS = frozenset({"P4", "P5"})
ABLATION_WARP_LAYERS = frozenset({"P3", "P4", "P5"})


@dataclass
class KeyframeCache:
    """Features retained from the most recent keyframe."""

    c3: Array          # stride 8, flow-estimation input
    p4: Array          # stride 16, post-FPN
    p5: Array          # stride 32, post-FPN
    frame_index: int
    p3: Array | None = None  # stride 8; only kept for the warp-P3 ablation


def inverse_warp(feature: Array, flow: FlowField) -> Array:
    """Sample ``feature`` at x + flow(x) with bilinear weights.

    Out-of-grid sample coordinates clamp to the edge. A zero flow field must
    reproduce the input exactly (including -0.0 payloads), so it short-circuits.
    """
    feature = as_f32(feature)
    if feature.ndim != 3:
        raise GraphError(f"inverse_warp expects CxHxW features, got {feature.shape}")
    _, h, w = feature.shape
    if flow.shape_hw != (h, w):
        raise GraphError(
            f"flow grid {flow.shape_hw} does not match feature grid {(h, w)}")
    if not flow.values.any():
        return feature.copy()

    cols = np.arange(w, dtype=np.float32)[None, :] + flow.values[0]
    rows = np.arange(h, dtype=np.float32)[:, None] + flow.values[1]
    cols = np.clip(cols, 0.0, w - 1.0)
    rows = np.clip(rows, 0.0, h - 1.0)

    x0 = np.floor(cols).astype(np.int64)
    y0 = np.floor(rows).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cols - x0).astype(np.float32)
    fy = (rows - y0).astype(np.float32)

    f00 = feature[:, y0, x0]
    f01 = feature[:, y0, x1]
    f10 = feature[:, y1, x0]
    f11 = feature[:, y1, x1]
    top = f00 * (1.0 - fx) + f01 * fx
    bot = f10 * (1.0 - fx) + f11 * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)


def scale_flow(flow: FlowField, target_stride: int) -> FlowField:
    """Re-express a flow field on a coarser grid.

    Average-pools displacements onto the target grid, then rescales magnitudes
    by source/target stride so values stay in units of target-grid cells.
    """
    if target_stride <= flow.stride:
        raise GraphError(
            f"target stride {target_stride} must exceed source stride {flow.stride}")
    if target_stride % flow.stride:
        raise GraphError(
            f"target stride {target_stride} not a multiple of source {flow.stride}")
    factor = target_stride // flow.stride
    h, w = flow.shape_hw
    if h % factor or w % factor:
        raise GraphError(f"flow grid {h}x{w} not divisible by pooling factor {factor}")
    v = flow.values.reshape(2, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    v = v * np.float32(flow.stride / target_stride)
    return FlowField(values=v.astype(np.float32), stride=target_stride)


def zero_flow(h: int, w: int, stride: int = 8) -> FlowField:
    return FlowField(values=np.zeros((2, h, w), dtype=np.float32), stride=stride)


def partial_transform(cache: KeyframeCache | None, c3_cur: Array, flow: FlowField,
                      fpn_graph: LayerGraph,
                      warp_layers: frozenset = DEFAULT_WARP_LAYERS) -> FeaturePyramid:
    """Assemble the non-keyframe pyramid P3-P7 from cached keyframe features.

    C4/C5 and their lateral convs never execute; the P3 smoothing conv reuses
    the keyframe FPN parameters so that identical frames with zero flow yield
    a bitwise-identical pyramid.
    """
    if cache is None:
        raise GraphError("keyframe cache is empty: the first frame must be a keyframe")
    c3_cur = as_f32(c3_cur)
    if flow.stride != 8:
        raise GraphError(f"partial transform expects stride-8 flow, got {flow.stride}")
    if flow.shape_hw != c3_cur.shape[1:]:
        raise GraphError(
            f"flow grid {flow.shape_hw} does not match C3 grid {c3_cur.shape[1:]}")
    if cache.c3.shape != c3_cur.shape:
        raise GraphError(
            f"cached C3 shape {cache.c3.shape} does not match current {c3_cur.shape}")

    w4 = inverse_warp(cache.p4, scale_flow(flow, 16))
    w5 = inverse_warp(cache.p5, scale_flow(flow, 32))

    if "P3" in warp_layers:
        if cache.p3 is None:
            raise GraphError("warp_layers includes P3 but the cache holds no P3")
        p3 = inverse_warp(cache.p3, flow)
        rest = run_graph(fpn_graph, {"p5": w5}, outputs=("p6", "p7"))
    else:
        out = run_graph(fpn_graph, {"c3": c3_cur, "p4": w4, "p5": w5},
                        outputs=("p3", "p6", "p7"))
        p3 = out["p3"]
        rest = out

    h, w = c3_cur.shape[1], c3_cur.shape[2]
    levels = {"P3": p3, "P4": w4, "P5": w5, "P6": rest["p6"], "P7": rest["p7"]}
    pyr = FeaturePyramid(levels, {n: LEVEL_STRIDES[n] for n in levels}, (h * 8, w * 8))
    pyr.validate()
    return pyr
