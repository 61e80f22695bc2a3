"""Toy staged backbone (C1-C5) and feature pyramid (P3-P7).

Each backbone stage is a run of 3x3 conv+ReLU blocks at the incoming
resolution whose last block downsamples with stride 2, so stage Ci sits at
stride 2^i. The C4-heavy default block layout keeps more than half of the
backbone cost in C4+C5, which is what makes skipping them on non-keyframes
worthwhile.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Array, GraphError, Layer, LayerGraph, run_graph
from .util import he_init, rng_for

C_LEVELS = ("C1", "C2", "C3", "C4", "C5")
P_LEVELS = ("P3", "P4", "P5", "P6", "P7")


@dataclass(frozen=True)
class BackboneSpec:
    """Per-stage conv block counts and channel widths for the toy backbone."""

    blocks: tuple[int, int, int, int, int] = (1, 2, 2, 6, 2)
    widths: tuple[int, int, int, int, int] = (8, 16, 24, 32, 48)
    fpn_width: int = 32

    def __post_init__(self):
        c4 = self.blocks[3]
        others = self.blocks[:3] + self.blocks[4:]
        if not all(c4 > b for b in others):
            raise ValueError(f"C4 block count must exceed every other stage: {self.blocks}")
        if any(b < 1 for b in self.blocks) or any(w < 1 for w in self.widths):
            raise ValueError("block counts and widths must be positive")


@dataclass
class FeaturePyramid:
    """Computed pyramid levels with per-level stride bookkeeping."""

    levels: dict[str, Array]
    strides: dict[str, int]
    input_hw: tuple[int, int]

    @property
    def present(self) -> frozenset:
        return frozenset(self.levels)

    def __getitem__(self, name: str) -> Array:
        return self.levels[name]

    def validate(self) -> None:
        h, w = self.input_hw
        for name, x in self.levels.items():
            s = self.strides[name]
            expect = (max(1, h // s), max(1, w // s))
            if x.shape[1:] != expect:
                raise GraphError(f"{name} has shape {x.shape[1:]}, expected {expect}")


LEVEL_STRIDES = {**{f"C{i}": 2 ** i for i in range(1, 6)},
                 **{f"P{i}": 2 ** i for i in range(3, 8)}}


def build_backbone_graph(spec: BackboneSpec, seed: int) -> LayerGraph:
    """Backbone graph: input 'image', outputs 'c1'..'c5'."""
    rng = rng_for(seed, "backbone")
    layers: list[Layer] = []
    params: dict[str, Array] = {}
    prev, prev_ch = "image", 3
    for i, (n_blocks, width) in enumerate(zip(spec.blocks, spec.widths), start=1):
        tag = f"C{i}"
        for b in range(n_blocks):
            stride = 2 if b == n_blocks - 1 else 1
            wname = f"backbone.c{i}.{b}.weight"
            bname = f"backbone.c{i}.{b}.bias"
            params[wname] = he_init(rng, (width, prev_ch, 3, 3))
            params[bname] = np.zeros(width, dtype=np.float32)
            conv = f"c{i}.{b}.conv"
            layers.append(Layer(conv, "conv2d", (prev,), wname, bname,
                                stride=stride, padding=1, tag=tag))
            act = f"c{i}" if b == n_blocks - 1 else f"c{i}.{b}.act"
            layers.append(Layer(act, "relu", (conv,), tag=tag))
            prev, prev_ch = act, width
    return LayerGraph(("image",), layers, params, ("c1", "c2", "c3", "c4", "c5"))


def build_fpn_graph(spec: BackboneSpec, seed: int) -> LayerGraph:
    """FPN graph: inputs 'c3','c4','c5', outputs 'p3'..'p7'.

    Each level is smoothed immediately, and the top-down pathway consumes the
    smoothed level, so a warped cache of p4/p5 can be injected in place of the
    computed values without changing anything downstream.
    """
    rng = rng_for(seed, "fpn")
    w = spec.fpn_width
    params: dict[str, Array] = {}

    def conv_params(name: str, c_in: int, c_out: int, k: int):
        params[f"fpn.{name}.weight"] = he_init(rng, (c_out, c_in, k, k))
        params[f"fpn.{name}.bias"] = np.zeros(c_out, dtype=np.float32)
        return f"fpn.{name}.weight", f"fpn.{name}.bias"

    lat5 = conv_params("lateral5", spec.widths[4], w, 1)
    lat4 = conv_params("lateral4", spec.widths[3], w, 1)
    lat3 = conv_params("lateral3", spec.widths[2], w, 1)
    sm5 = conv_params("smooth5", w, w, 3)
    sm4 = conv_params("smooth4", w, w, 3)
    sm3 = conv_params("smooth3", w, w, 3)
    dn6 = conv_params("down6", w, w, 3)
    dn7 = conv_params("down7", w, w, 3)

    layers = [
        Layer("lat5", "conv1x1", ("c5",), *lat5, tag="fpn"),
        Layer("p5", "conv2d", ("lat5",), *sm5, padding=1, tag="fpn"),
        Layer("lat4", "conv1x1", ("c4",), *lat4, tag="fpn"),
        Layer("up5", "upsample2x", ("p5",), tag="fpn"),
        Layer("m4", "add", ("lat4", "up5"), tag="fpn"),
        Layer("p4", "conv2d", ("m4",), *sm4, padding=1, tag="fpn"),
        Layer("lat3", "conv1x1", ("c3",), *lat3, tag="fpn"),
        Layer("up4", "upsample2x", ("p4",), tag="fpn"),
        Layer("m3", "add", ("lat3", "up4"), tag="fpn"),
        Layer("p3", "conv2d", ("m3",), *sm3, padding=1, tag="fpn"),
        Layer("p6", "conv2d", ("p5",), *dn6, stride=2, padding=1, tag="fpn"),
        Layer("p7", "conv2d", ("p6",), *dn7, stride=2, padding=1, tag="fpn"),
    ]
    return LayerGraph(("c3", "c4", "c5"), layers, params, ("p3", "p4", "p5", "p6", "p7"))


def backbone_forward(graph: LayerGraph, image: Array, stop_level: str = "C5"
                     ) -> FeaturePyramid:
    """Run the backbone up to ``stop_level`` ('C3' or 'C5').

    With 'C3' the graph executes only the C1-C3 prefix; C4/C5 layers never run
    and charge no FLOPs.
    """
    if stop_level not in ("C3", "C5"):
        raise GraphError(f"stop_level must be 'C3' or 'C5', got {stop_level!r}")
    c, h, w = image.shape
    if c != 3 or h % 32 or w % 32:
        raise GraphError(f"backbone input must be 3xHxW with H,W divisible by 32, got {image.shape}")
    names = ("c1", "c2", "c3") if stop_level == "C3" else ("c1", "c2", "c3", "c4", "c5")
    out = run_graph(graph, {"image": image}, outputs=names)
    levels = {n.upper(): out[n] for n in names}
    pyr = FeaturePyramid(levels, {n: LEVEL_STRIDES[n] for n in levels}, (h, w))
    pyr.validate()
    return pyr


def fpn_forward(graph: LayerGraph, pyramid: FeaturePyramid) -> FeaturePyramid:
    """Add P3-P7 to a pyramid that has C3-C5 present."""
    for need in ("C3", "C4", "C5"):
        if need not in pyramid.levels:
            raise GraphError(f"fpn_forward requires {need}; present: {sorted(pyramid.present)}")
    feeds = {"c3": pyramid["C3"], "c4": pyramid["C4"], "c5": pyramid["C5"]}
    out = run_graph(graph, feeds)
    levels = dict(pyramid.levels)
    levels.update({n.upper(): out[n] for n in out})
    strides = {n: LEVEL_STRIDES[n] for n in levels}
    pyr = FeaturePyramid(levels, strides, pyramid.input_hw)
    pyr.validate()
    return pyr
