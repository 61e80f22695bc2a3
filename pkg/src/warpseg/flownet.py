"""Feature-level flow estimation between a keyframe and the current frame.

The estimator consumes backbone C3 features from both frames instead of raw
pixels: both inputs pass through a shared channel-reduction 1x1 conv, are
concatenated, encoded coarse-to-fine, and decoded back up through skip
connections to a single 2-channel flow map at C3 resolution (stride 8).
Flow units are grid cells at that stride.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .graph import Array, GraphError, Layer, LayerGraph, as_f32, graph_cost, run_graph
from .util import he_init, rng_for


@dataclass
class FlowField:
    """2-channel displacement map: channel 0 horizontal, channel 1 vertical."""

    values: Array  # [2, h, w] in units of cells at `stride`
    stride: int

    def __post_init__(self):
        self.values = as_f32(self.values)
        if self.values.ndim != 3 or self.values.shape[0] != 2:
            raise GraphError(f"flow field must be 2xHxW, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise GraphError("flow field contains non-finite values")

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.values.shape[1:]


VALID_REDUCTIONS = (1.0, 0.5, 0.25, 0.125)


@dataclass(frozen=True)
class FlowNetConfig:
    """Channel-reduction factor and trunk layout of the flow estimator."""

    reduction: float = 0.25
    trunk_depth: int = 3
    refine_levels: int = 2
    trunk_width: int = 32

    def __post_init__(self):
        if self.reduction not in VALID_REDUCTIONS:
            raise ValueError(f"reduction must be one of {VALID_REDUCTIONS}")
        if self.trunk_depth < self.refine_levels + 1:
            raise ValueError("trunk depth must cover every pyramid scale")
        if self.reduction == 0.125:
            warnings.warn("1/8 channel reduction: flow pre-training tends not to converge",
                          stacklevel=2)

    def reduced_channels(self, c3_channels: int) -> int:
        r = int(round(c3_channels * self.reduction))
        if r < 1:
            raise ValueError(
                f"reduction {self.reduction} of {c3_channels} channels leaves none")
        return r


def build_flow_graph(config: FlowNetConfig, c3_channels: int, seed: int) -> LayerGraph:
    """Flow graph: inputs 'c3_key','c3_cur', output 'flow' (2 channels, stride 8)."""
    rng = rng_for(seed, "flow")
    r = config.reduced_channels(c3_channels)
    w = config.trunk_width
    params: dict[str, Array] = {}

    def conv_params(name: str, c_in: int, c_out: int, k: int):
        params[f"flow.{name}.weight"] = he_init(rng, (c_out, c_in, k, k))
        params[f"flow.{name}.bias"] = np.zeros(c_out, dtype=np.float32)
        return f"flow.{name}.weight", f"flow.{name}.bias"

    reduce_p = conv_params("reduce", c3_channels, r, 1)
    layers = [
        # Shared reduction conv applied to both frames' features.
        Layer("red_key", "conv1x1", ("c3_key",), *reduce_p, tag="flow"),
        Layer("red_key.act", "relu", ("red_key",), tag="flow"),
        Layer("red_cur", "conv1x1", ("c3_cur",), *reduce_p, tag="flow"),
        Layer("red_cur.act", "relu", ("red_cur",), tag="flow"),
        Layer("cat0", "concat", ("red_key.act", "red_cur.act"), tag="flow"),
    ]

    # Encoder: one conv per scale, extra depth appended at the coarsest scale.
    scales = config.refine_levels + 1
    extra = config.trunk_depth - scales
    prev, prev_ch = "cat0", 2 * r
    skips: list[str] = []
    for s in range(scales):
        wp = conv_params(f"enc{s}", prev_ch, w, 3)
        layers.append(Layer(f"enc{s}", "conv2d", (prev,), *wp, padding=1, tag="flow"))
        layers.append(Layer(f"enc{s}.act", "relu", (f"enc{s}",), tag="flow"))
        prev, prev_ch = f"enc{s}.act", w
        skips.append(prev)
        if s < scales - 1:
            layers.append(Layer(f"down{s}", "downsample2x", (prev,), tag="flow"))
            prev = f"down{s}"
    for e in range(extra):
        wp = conv_params(f"deep{e}", w, w, 3)
        layers.append(Layer(f"deep{e}", "conv2d", (prev,), *wp, padding=1, tag="flow"))
        layers.append(Layer(f"deep{e}.act", "relu", (f"deep{e}",), tag="flow"))
        prev = f"deep{e}.act"

    # Decoder: upsample, merge the skip, refine; finest level predicts flow.
    for lvl in range(config.refine_levels):
        skip = skips[-(lvl + 2)]
        layers.append(Layer(f"up{lvl}", "upsample2x", (prev,), tag="flow"))
        layers.append(Layer(f"mix{lvl}", "concat", (f"up{lvl}", skip), tag="flow"))
        wp = conv_params(f"ref{lvl}", 2 * w, w, 3)
        layers.append(Layer(f"ref{lvl}", "conv2d", (f"mix{lvl}",), *wp, padding=1, tag="flow"))
        layers.append(Layer(f"ref{lvl}.act", "relu", (f"ref{lvl}",), tag="flow"))
        prev = f"ref{lvl}.act"

    predict_p = conv_params("predict", w, 2, 3)
    layers.append(Layer("flow", "conv2d", (prev,), *predict_p, padding=1, tag="flow"))
    return LayerGraph(("c3_key", "c3_cur"), layers, params, ("flow",))


def flow_forward(graph: LayerGraph, c3_key: Array, c3_cur: Array) -> FlowField:
    """Estimate current-frame-anchored flow pointing back to the keyframe."""
    c3_key = as_f32(c3_key)
    c3_cur = as_f32(c3_cur)
    if c3_key.shape != c3_cur.shape:
        raise GraphError(
            f"C3 shape mismatch between frames: {c3_key.shape} vs {c3_cur.shape}")
    out = run_graph(graph, {"c3_key": c3_key, "c3_cur": c3_cur})
    return FlowField(values=out["flow"], stride=8)


def flow_macs(config: FlowNetConfig, c3_shape: tuple[int, int, int]) -> int:
    """Symbolic conv multiply-adds of one flow forward pass."""
    graph = build_flow_graph(config, c3_shape[0], seed=0)
    macs = graph_cost(graph, {"c3_key": c3_shape, "c3_cur": c3_shape})
    return sum(macs.values())


def epe_loss(pred: FlowField, gt: FlowField) -> float:
    """Mean endpoint error: Euclidean norm of the flow difference per cell."""
    _check_compatible(pred, gt)
    d = pred.values - gt.values
    return float(np.sqrt(d[0] ** 2 + d[1] ** 2).mean())


def epe_loss_grad(pred: FlowField, gt: FlowField) -> tuple[float, Array]:
    """EPE value plus its gradient w.r.t. the predicted flow values."""
    _check_compatible(pred, gt)
    d = pred.values - gt.values
    norm = np.sqrt(d[0] ** 2 + d[1] ** 2)
    n = norm.size
    safe = np.where(norm > 0, norm, np.float32(1.0))
    grad = d / safe[None] / np.float32(n)
    grad[:, norm == 0] = 0.0
    return float(norm.mean()), grad.astype(np.float32)


def _check_compatible(pred: FlowField, gt: FlowField) -> None:
    if pred.stride != gt.stride:
        raise GraphError(f"flow stride mismatch: {pred.stride} vs {gt.stride}")
    if pred.values.shape != gt.values.shape:
        raise GraphError(
            f"flow shape mismatch: {pred.values.shape} vs {gt.values.shape}")
