"""Static layer graphs with tape-based reverse-mode autodiff.

Tensors are plain row-major ``numpy.float32`` arrays. A ``LayerGraph`` is an
ordered list of layer records wired by name; running one is a pure function of
(feeds, params), so graphs are safely shareable across threads. Multiply-add
counts of executed convolutions are reported through a thread-local
``FlopCounter`` when one is installed.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

Array = np.ndarray

LAYER_KINDS = ("conv2d", "conv1x1", "relu", "upsample2x", "downsample2x", "add", "concat")
CONV_KINDS = ("conv2d", "conv1x1")


class GraphError(ValueError):
    """Raised for malformed graphs or inconsistent feeds."""


def as_f32(x) -> Array:
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass(frozen=True)
class TensorQuant:
    """Fake-quantization applied to a tensor: 'fp16' or 'int8' with a scale."""

    mode: str
    scale: float = 0.0


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple[str, ...]
    weight: str | None = None
    bias: str | None = None
    stride: int = 1
    padding: int = 0
    tag: str = ""  # cost-accounting stage label ("C1".."C5", "fpn", ...)


@dataclass
class LayerGraph:
    """Ordered, acyclic layer list plus named parameter tensors."""

    inputs: tuple[str, ...]
    layers: list[Layer]
    params: dict[str, Array]
    outputs: tuple[str, ...]
    # Fake-quant annotations; populated by precision application, empty for FP32.
    input_quant: dict[str, TensorQuant] = field(default_factory=dict)
    output_quant: dict[str, TensorQuant] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set(self.inputs)
        if len(seen) != len(self.inputs):
            raise GraphError("duplicate graph input names")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise GraphError(f"unknown layer kind {layer.kind!r} in {layer.name!r}")
            if layer.name in seen:
                raise GraphError(f"duplicate tensor name {layer.name!r}")
            for ref in layer.inputs:
                if ref not in seen:
                    raise GraphError(
                        f"layer {layer.name!r} consumes {ref!r} before it is produced"
                    )
            if layer.kind in CONV_KINDS:
                w = self.params.get(layer.weight or "")
                b = self.params.get(layer.bias or "")
                if w is None or b is None:
                    raise GraphError(f"conv layer {layer.name!r} is missing parameters")
                if w.ndim != 4:
                    raise GraphError(f"{layer.weight!r} must be rank 4 (Cout,Cin,k,k)")
                k = w.shape[2]
                if w.shape[3] != k or k % 2 != 1:
                    raise GraphError(f"{layer.weight!r} must use a square odd kernel")
                if layer.kind == "conv1x1" and k != 1:
                    raise GraphError(f"conv1x1 layer {layer.name!r} has kernel size {k}")
                if b.shape != (w.shape[0],):
                    raise GraphError(f"{layer.bias!r} shape does not match {layer.weight!r}")
            elif layer.kind == "add":
                if len(layer.inputs) != 2:
                    raise GraphError(f"add layer {layer.name!r} needs exactly 2 inputs")
            elif layer.kind == "concat":
                if len(layer.inputs) < 2:
                    raise GraphError(f"concat layer {layer.name!r} needs >= 2 inputs")
            else:
                if len(layer.inputs) != 1:
                    raise GraphError(f"{layer.kind} layer {layer.name!r} needs 1 input")
            seen.add(layer.name)
        for out in self.outputs:
            if out not in seen:
                raise GraphError(f"declared output {out!r} is never produced")

    @property
    def layer_map(self) -> dict[str, Layer]:
        return {l.name: l for l in self.layers}

    def is_quantized(self) -> bool:
        return bool(self.input_quant or self.output_quant)

    def with_params(self, params: dict[str, Array]) -> "LayerGraph":
        return LayerGraph(self.inputs, list(self.layers), dict(params), self.outputs,
                          dict(self.input_quant), dict(self.output_quant))


# --------------------------------------------------------------------------
# FLOP accounting
# --------------------------------------------------------------------------

class FlopCounter:
    """Accumulates executed conv multiply-adds per stage tag (1 MA = 2 FLOPs)."""

    def __init__(self):
        self.macs: dict[str, int] = {}

    def add(self, tag: str, macs: int) -> None:
        self.macs[tag] = self.macs.get(tag, 0) + macs

    def total_macs(self) -> int:
        return sum(self.macs.values())

    def flops(self) -> dict[str, int]:
        return {tag: 2 * m for tag, m in self.macs.items()}

    def total_flops(self) -> int:
        return 2 * self.total_macs()


_tls = threading.local()


@contextmanager
def count_flops(counter: FlopCounter):
    """Install ``counter`` for conv executions on this thread."""
    prev = getattr(_tls, "counter", None)
    _tls.counter = counter
    try:
        yield counter
    finally:
        _tls.counter = prev


def _active_counter() -> FlopCounter | None:
    return getattr(_tls, "counter", None)


def conv_mac_count(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    return c_out * h_out * w_out * c_in * k * k


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise GraphError(f"conv reduces {h}x{w} below 1x1 (k={k}, stride={stride}, pad={padding})")
    return ho, wo


# --------------------------------------------------------------------------
# Primitive forward/backward kernels
# --------------------------------------------------------------------------

def _im2col(x: Array, k: int, stride: int, padding: int) -> tuple[Array, tuple[int, int]]:
    c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(c, k, k, ho, wo), strides=(s0, s1, s2, stride * s1, stride * s2)
    )
    return windows.reshape(c * k * k, ho * wo).copy(), (ho, wo)


def _col2im(dcols: Array, x_shape: tuple[int, int, int], k: int, stride: int, padding: int) -> Array:
    c, h, w = x_shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    dx = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float32)
    d = dcols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j]
    if padding:
        dx = dx[:, padding:h + padding, padding:w + padding]
    return np.ascontiguousarray(dx)


def conv2d(x: Array, weight: Array, bias: Array, stride: int = 1, padding: int = 0,
           tag: str = "") -> Array:
    """Cross-correlation of a CHW input with an (Cout,Cin,k,k) kernel."""
    x = as_f32(x)
    weight = as_f32(weight)
    bias = as_f32(bias)
    if x.ndim != 3:
        raise GraphError(f"conv2d input must be CxHxW, got shape {x.shape}")
    c_out, c_in, k, _ = weight.shape
    if x.shape[0] != c_in:
        raise GraphError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, weight expects {c_in}"
        )
    cols, (ho, wo) = _im2col(x, k, stride, padding)
    out = weight.reshape(c_out, -1) @ cols + bias[:, None]
    counter = _active_counter()
    if counter is not None:
        counter.add(tag, conv_mac_count(c_in, c_out, k, ho, wo))
    return out.reshape(c_out, ho, wo)


def _conv_backward(x: Array, weight: Array, grad_out: Array, stride: int, padding: int
                   ) -> tuple[Array, Array, Array]:
    c_out, c_in, k, _ = weight.shape
    cols, (ho, wo) = _im2col(x, k, stride, padding)
    g = grad_out.reshape(c_out, ho * wo)
    d_weight = (g @ cols.T).reshape(weight.shape)
    d_bias = g.sum(axis=1)
    dcols = weight.reshape(c_out, -1).T @ g
    d_x = _col2im(dcols, x.shape, k, stride, padding)
    return d_x, d_weight, d_bias


def relu(x: Array) -> Array:
    return np.maximum(x, np.float32(0.0))


def upsample2x(x: Array) -> Array:
    """Nearest-neighbor 2x upsampling: each cell becomes a 2x2 block."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2x_backward(grad_out: Array) -> Array:
    c, h2, w2 = grad_out.shape
    return grad_out.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


def downsample2x(x: Array) -> Array:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise GraphError(f"downsample2x needs even spatial dims, got {h}x{w}")
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)).astype(np.float32)


def _downsample2x_backward(grad_out: Array) -> Array:
    g = np.repeat(np.repeat(grad_out, 2, axis=1), 2, axis=2)
    return (g * np.float32(0.25)).astype(np.float32)


def apply_quant(x: Array, q: TensorQuant | None) -> Array:
    if q is None:
        return x
    if q.mode == "fp16":
        from .numerics import fp16_emulate
        return fp16_emulate(x)
    if q.mode == "int8":
        from .numerics import fake_quant_int8
        return fake_quant_int8(x, q.scale)
    raise GraphError(f"unknown quant mode {q.mode!r}")


# --------------------------------------------------------------------------
# Graph execution
# --------------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded forward pass: values per tensor name plus execution order."""

    graph: LayerGraph
    values: dict[str, Array]
    executed: list[str]
    requested: tuple[str, ...]


def _needed_layers(graph: LayerGraph, outputs: tuple[str, ...], feeds: dict[str, Array]
                   ) -> list[Layer]:
    """Layers that must execute to produce ``outputs``, honoring injected feeds."""
    by_name = graph.layer_map
    needed: set[str] = set()
    stack = [o for o in outputs if o not in feeds]
    while stack:
        name = stack.pop()
        if name in needed or name in graph.inputs:
            continue
        if name in feeds:
            continue
        layer = by_name.get(name)
        if layer is None:
            raise GraphError(f"requested tensor {name!r} is not produced by the graph")
        needed.add(name)
        for ref in layer.inputs:
            if ref not in feeds and ref not in graph.inputs:
                stack.append(ref)
    return [l for l in graph.layers if l.name in needed]


def run_graph(graph: LayerGraph, feeds: dict[str, Array], outputs: tuple[str, ...] | None = None,
              record_tape: bool = False):
    """Execute the graph and return ``{name: value}`` for the requested outputs.

    ``feeds`` must cover the graph inputs reachable from ``outputs``; it may
    also inject values for interior tensors, in which case the layers that
    would produce them (and their exclusive ancestors) are skipped entirely.
    """
    if outputs is None:
        outputs = graph.outputs
    if record_tape and graph.is_quantized():
        raise GraphError("taped forward passes require an unquantized (FP32) graph")

    values: dict[str, Array] = {}
    for name, val in feeds.items():
        val = as_f32(val)
        if name in graph.inputs:
            val = apply_quant(val, graph.input_quant.get(name))
        values[name] = val

    plan = _needed_layers(graph, tuple(outputs), feeds)
    for layer in plan:
        for ref in layer.inputs:
            if ref in graph.inputs and ref not in values:
                raise GraphError(f"missing feed for graph input {ref!r}")
    executed: list[str] = []
    for layer in plan:
        args = [values[ref] for ref in layer.inputs]
        if layer.kind in CONV_KINDS:
            out = conv2d(args[0], graph.params[layer.weight], graph.params[layer.bias],
                         layer.stride, layer.padding, tag=layer.tag)
        elif layer.kind == "relu":
            out = relu(args[0])
        elif layer.kind == "upsample2x":
            out = upsample2x(args[0])
        elif layer.kind == "downsample2x":
            out = downsample2x(args[0])
        elif layer.kind == "add":
            if args[0].shape != args[1].shape:
                raise GraphError(f"add layer {layer.name!r} got shapes "
                                 f"{args[0].shape} vs {args[1].shape}")
            out = args[0] + args[1]
        else:  # concat
            out = np.concatenate(args, axis=0)
        values[layer.name] = apply_quant(out, graph.output_quant.get(layer.name))
        executed.append(layer.name)

    result = {name: values[name] for name in outputs}
    if record_tape:
        return result, Tape(graph=graph, values=values, executed=executed,
                            requested=tuple(outputs))
    return result


def graph_backward(graph: LayerGraph, tape: Tape, out_grads: dict[str, Array]
                   ) -> tuple[dict[str, Array], dict[str, Array]]:
    """Reverse-mode pass over a recorded tape.

    Returns ``(param_grads, leaf_grads)`` where leaf grads cover the graph
    inputs and any injected interior tensors. Parameters referenced by several
    layers (shared weights) accumulate across all uses.
    """
    if tape.graph is not graph:
        raise GraphError("backward called with a tape recorded on a different graph")
    grads: dict[str, Array] = {}
    for name, g in out_grads.items():
        if name not in tape.values:
            raise GraphError(f"gradient provided for {name!r} which was never computed")
        grads[name] = as_f32(g).copy()

    param_grads: dict[str, Array] = {}
    by_name = graph.layer_map
    for name in reversed(tape.executed):
        g = grads.pop(name, None)
        if g is None:
            continue
        layer = by_name[name]
        args = [tape.values[ref] for ref in layer.inputs]
        if layer.kind in CONV_KINDS:
            dx, dw, db = _conv_backward(args[0], graph.params[layer.weight], g,
                                        layer.stride, layer.padding)
            _accumulate(param_grads, layer.weight, dw)
            _accumulate(param_grads, layer.bias, db)
            in_grads = [dx]
        elif layer.kind == "relu":
            in_grads = [g * (args[0] > 0)]
        elif layer.kind == "upsample2x":
            in_grads = [_upsample2x_backward(g)]
        elif layer.kind == "downsample2x":
            in_grads = [_downsample2x_backward(g)]
        elif layer.kind == "add":
            in_grads = [g, g.copy()]
        else:  # concat
            splits = np.cumsum([a.shape[0] for a in args])[:-1]
            in_grads = [np.ascontiguousarray(p) for p in np.split(g, splits, axis=0)]
        for ref, dg in zip(layer.inputs, in_grads):
            _accumulate(grads, ref, dg)

    leaf_grads = {name: g for name, g in grads.items()}
    return param_grads, leaf_grads


def _accumulate(store: dict[str, Array], key: str, value: Array) -> None:
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


# --------------------------------------------------------------------------
# Symbolic costing (no execution)
# --------------------------------------------------------------------------

def graph_cost(graph: LayerGraph, feed_shapes: dict[str, tuple[int, ...]],
               outputs: tuple[str, ...] | None = None) -> dict[str, int]:
    """Per-tag conv multiply-add counts from shape propagation alone.

    Mirrors exactly what an instrumented ``run_graph`` over the same outputs
    would record; injected feed shapes skip producers the same way.
    """
    if outputs is None:
        outputs = graph.outputs
    shapes: dict[str, tuple[int, ...]] = dict(feed_shapes)
    macs: dict[str, int] = {}
    plan = _needed_layers(graph, tuple(outputs), {k: None for k in feed_shapes})
    for layer in plan:
        in_shapes = [shapes[ref] for ref in layer.inputs]
        if layer.kind in CONV_KINDS:
            c_out, c_in, k, _ = graph.params[layer.weight].shape
            _, h, w = in_shapes[0]
            ho, wo = conv_output_hw(h, w, k, layer.stride, layer.padding)
            macs[layer.tag] = macs.get(layer.tag, 0) + conv_mac_count(c_in, c_out, k, ho, wo)
            shapes[layer.name] = (c_out, ho, wo)
        elif layer.kind == "upsample2x":
            c, h, w = in_shapes[0]
            shapes[layer.name] = (c, 2 * h, 2 * w)
        elif layer.kind == "downsample2x":
            c, h, w = in_shapes[0]
            shapes[layer.name] = (c, h // 2, w // 2)
        elif layer.kind == "concat":
            c = sum(s[0] for s in in_shapes)
            shapes[layer.name] = (c,) + tuple(in_shapes[0][1:])
        else:
            shapes[layer.name] = in_shapes[0]
    return macs
