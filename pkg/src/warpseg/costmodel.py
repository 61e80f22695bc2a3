"""Symbolic conv FLOP accounting: ResNet-101 stage breakdown and the toy model.

Convention: one multiply-add counts as 2 FLOPs; only convolutions are counted
(no ReLU/BN/pooling). The ResNet-101 "# of convs" row counts main-path convs
only, while FLOPs include the projection-shortcut convs, which is the pairing
that reproduces the published stage percentages.
"""
from __future__ import annotations

from dataclasses import dataclass

from .backbone import BackboneSpec, build_backbone_graph, build_fpn_graph
from .graph import conv_mac_count, conv_output_hw, graph_cost


@dataclass
class CostReport:
    flops: dict[str, int]
    percentages: dict[str, float]
    conv_count: dict[str, int]

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())


def _percentages(flops: dict[str, int]) -> dict[str, float]:
    total = sum(flops.values())
    return {k: 100.0 * v / total for k, v in flops.items()}


# --------------------------------------------------------------------------
# ResNet-101
# --------------------------------------------------------------------------

_RESNET101_BLOCKS = {"C2": 3, "C3": 4, "C4": 23, "C5": 3}
_RESNET101_WIDTHS = {"C2": 64, "C3": 128, "C4": 256, "C5": 512}
_EXPANSION = 4


def resnet101_cost_model(input_h: int, input_w: int) -> CostReport:
    """Stage-wise conv counts and FLOPs for standard ResNet-101 (no execution).

    Bottleneck blocks 3/4/23/3; the stride-2 reduction of each stage sits on
    the first block's 3x3 conv, with a 1x1 projection on that block's shortcut.
    """
    if input_h < 224 or input_w < 224:
        raise ValueError(f"cost model expects input dims >= 224, got {input_h}x{input_w}")

    macs = {name: 0 for name in ("C1", "C2", "C3", "C4", "C5")}
    convs = {name: 0 for name in ("C1", "C2", "C3", "C4", "C5")}

    def conv(stage: str, c_in: int, c_out: int, k: int, h: int, w: int,
             stride: int = 1, pad: int = 0, counted: bool = True) -> tuple[int, int]:
        ho, wo = conv_output_hw(h, w, k, stride, pad)
        macs[stage] += conv_mac_count(c_in, c_out, k, ho, wo)
        if counted:
            convs[stage] += 1
        return ho, wo

    # Stem: 7x7/2 conv, then 3x3/2 max pool (pooling is not costed).
    h, w = conv("C1", 3, 64, 7, input_h, input_w, stride=2, pad=3)
    h, w = conv_output_hw(h, w, 3, 2, 1)

    c_in = 64
    for stage in ("C2", "C3", "C4", "C5"):
        width = _RESNET101_WIDTHS[stage]
        c_out = width * _EXPANSION
        stride = 1 if stage == "C2" else 2
        for block in range(_RESNET101_BLOCKS[stage]):
            s = stride if block == 0 else 1
            conv(stage, c_in, width, 1, h, w)
            h2, w2 = conv(stage, width, width, 3, h, w, stride=s, pad=1)
            conv(stage, width, c_out, 1, h2, w2)
            if block == 0:
                conv(stage, c_in, c_out, 1, h, w, stride=s, counted=False)
            h, w = h2, w2
            c_in = c_out

    flops = {k: 2 * v for k, v in macs.items()}
    return CostReport(flops=flops, percentages=_percentages(flops), conv_count=convs)


# --------------------------------------------------------------------------
# Toy backbone + FPN
# --------------------------------------------------------------------------

def toy_cost_model(spec: BackboneSpec, input_h: int, input_w: int) -> CostReport:
    """Exact per-stage FLOPs of the toy backbone and FPN at the given input."""
    backbone = build_backbone_graph(spec, seed=0)
    fpn = build_fpn_graph(spec, seed=0)
    macs = graph_cost(backbone, {"image": (3, input_h, input_w)})
    c3 = (spec.widths[2], input_h // 8, input_w // 8)
    c4 = (spec.widths[3], input_h // 16, input_w // 16)
    c5 = (spec.widths[4], input_h // 32, input_w // 32)
    macs.update(graph_cost(fpn, {"c3": c3, "c4": c4, "c5": c5}))
    flops = {k: 2 * v for k, v in macs.items()}
    conv_count = {f"C{i}": n for i, n in enumerate(spec.blocks, start=1)}
    conv_count["fpn"] = 8
    return CostReport(flops=flops, percentages=_percentages(flops), conv_count=conv_count)


def backbone_flops(spec: BackboneSpec, input_h: int, input_w: int,
                   stop_level: str = "C5") -> int:
    """Backbone-only FLOPs for a full (C5) or truncated (C3) forward pass."""
    report = toy_cost_model(spec, input_h, input_w)
    stages = ("C1", "C2", "C3") if stop_level == "C3" else ("C1", "C2", "C3", "C4", "C5")
    return sum(report.flops[s] for s in stages)


def amortized_backbone_flops(spec: BackboneSpec, input_h: int, input_w: int,
                             interval: int) -> float:
    """Mean backbone FLOPs per frame over one keyframe cycle of the schedule."""
    full = backbone_flops(spec, input_h, input_w, "C5")
    partial = backbone_flops(spec, input_h, input_w, "C3")
    return (full + (interval - 1) * partial) / interval
