"""Model bundle: backbone, FPN, prototype net, prediction head, and flow net."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import (BackboneSpec, FeaturePyramid, backbone_forward, build_backbone_graph,
                       build_fpn_graph, fpn_forward)
from .flownet import FlowNetConfig, build_flow_graph, flow_macs
from .graph import Array, LayerGraph, graph_cost
from .head import (AnchorSet, Detection, build_anchors, build_predhead_graph,
                   build_protonet_graph, detections_from_raw, predhead_forward,
                   protonet_forward)
from .yedg import load_weights, save_weights

NUM_CLASSES = 3
NUM_PROTOTYPES = 4


@dataclass
class SegModel:
    spec: BackboneSpec
    flow_config: FlowNetConfig
    backbone: LayerGraph
    fpn: LayerGraph
    protonet: LayerGraph
    predhead: LayerGraph
    flownet: LayerGraph
    num_classes: int = NUM_CLASSES
    num_prototypes: int = NUM_PROTOTYPES

    def replace_graphs(self, **graphs: LayerGraph) -> "SegModel":
        return replace(self, **graphs)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for graph in (self.backbone, self.fpn, self.protonet, self.predhead, self.flownet):
            out.update(graph.params)
        return out

    def load_parameters(self, params: dict[str, Array]) -> None:
        for graph in (self.backbone, self.fpn, self.protonet, self.predhead, self.flownet):
            for name in graph.params:
                if name in params:
                    graph.params[name] = np.ascontiguousarray(params[name], dtype=np.float32)

    def save(self, path) -> None:
        save_weights(path, self.parameters())

    # -- anchors and costs ----------------------------------------------------

    def anchors_for(self, input_hw: tuple[int, int]) -> AnchorSet:
        h, w = input_hw
        level_hw = {f"p{i}": (max(1, h // 2 ** i), max(1, w // 2 ** i)) for i in range(3, 8)}
        strides = {f"p{i}": 2 ** i for i in range(3, 8)}
        return build_anchors(input_hw, level_hw, strides)

    def component_flops(self, input_hw: tuple[int, int]) -> dict[str, int]:
        """Symbolic per-component conv FLOPs of one full-frame (keyframe) pass."""
        h, w = input_hw
        c3 = (self.spec.widths[2], h // 8, w // 8)
        c4 = (self.spec.widths[3], h // 16, w // 16)
        c5 = (self.spec.widths[4], h // 32, w // 32)
        fw = self.spec.fpn_width
        p_shapes = {f"p{i}": (fw, max(1, h // 2 ** i), max(1, w // 2 ** i)) for i in range(3, 8)}
        costs = {
            "backbone": graph_cost(self.backbone, {"image": (3, h, w)}),
            "fpn": graph_cost(self.fpn, {"c3": c3, "c4": c4, "c5": c5}),
            "protonet": graph_cost(self.protonet, {"p3": p_shapes["p3"]}),
            "predhead": graph_cost(self.predhead, p_shapes),
        }
        flops = {name: 2 * sum(m.values()) for name, m in costs.items()}
        flops["flownet"] = 2 * flow_macs(self.flow_config, c3)
        return flops


def build_model(seed: int, spec: BackboneSpec | None = None,
                flow_config: FlowNetConfig | None = None,
                num_classes: int = NUM_CLASSES,
                num_prototypes: int = NUM_PROTOTYPES) -> SegModel:
    spec = spec or BackboneSpec()
    flow_config = flow_config or FlowNetConfig()
    return SegModel(
        spec=spec,
        flow_config=flow_config,
        backbone=build_backbone_graph(spec, seed),
        fpn=build_fpn_graph(spec, seed),
        protonet=build_protonet_graph(spec.fpn_width, num_prototypes, seed),
        predhead=build_predhead_graph(spec.fpn_width, 3, num_classes, num_prototypes, seed),
        flownet=build_flow_graph(flow_config, spec.widths[2], seed),
        num_classes=num_classes,
        num_prototypes=num_prototypes,
    )


def load_model(path, seed: int = 0, spec: BackboneSpec | None = None,
               flow_config: FlowNetConfig | None = None) -> SegModel:
    model = build_model(seed, spec, flow_config)
    model.load_parameters(load_weights(path))
    return model


# --------------------------------------------------------------------------
# Single-image inference
# --------------------------------------------------------------------------

def forward_image(model: SegModel, image: Array, score_thresh: float = 0.05,
                  nms_iou: float = 0.5, top_k: int = 20
                  ) -> tuple[FeaturePyramid, Array, list[Detection]]:
    """Full keyframe-style pass: pyramid, prototypes, post-NMS detections."""
    pyramid = backbone_forward(model.backbone, image, "C5")
    pyramid = fpn_forward(model.fpn, pyramid)
    protos = protonet_forward(model.protonet, pyramid["P3"])
    raw = predhead_forward(model.predhead, pyramid, model.num_classes,
                           model.num_prototypes)
    anchors = model.anchors_for(pyramid.input_hw)
    dets = detections_from_raw(raw, anchors, score_thresh, nms_iou, top_k)
    return pyramid, protos, dets
