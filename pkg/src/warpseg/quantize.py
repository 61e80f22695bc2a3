"""Emulated post-training quantization: histograms, entropy calibration,
per-component precision application, and the mixed-precision grid search.

INT8 activation scales come from entropy calibration: 2048-bin histograms of
absolute activations, candidate clip thresholds scored by the KL divergence
between the clipped reference distribution and its 128-level re-quantization.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from .graph import Array, LayerGraph, TensorQuant
from .numerics import fake_quant_weight_per_channel, fp16_emulate

N_BINS = 2048
N_LEVELS = 128
KL_ZERO_SNAP = 1e-10  # sums this close to zero are exact ties numerically
MODES = ("FP32", "FP16", "INT8")
COMPONENTS = ("backbone", "fpn", "protonet", "predhead", "flownet")
MODE_COST_WEIGHT = {"INT8": 0.25, "FP16": 0.5, "FP32": 1.0}


class CalibrationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Histogram collection
# --------------------------------------------------------------------------

@dataclass
class CalibrationHistogram:
    """Counts of absolute activation values in 2048 uniform bins over [0, max_abs]."""

    bins: np.ndarray  # int64[N_BINS]
    max_abs: float
    sample_count: int

    @property
    def bin_width(self) -> float:
        return self.max_abs / N_BINS

    @property
    def all_zero(self) -> bool:
        return self.max_abs <= 0.0


def _bin_indices(values: Array, max_abs: float) -> np.ndarray:
    width = max_abs / N_BINS
    idx = (np.abs(values, dtype=np.float64) / width).astype(np.int64)
    return np.minimum(idx, N_BINS - 1)


def collect_histogram(tensors: list[Array]) -> CalibrationHistogram:
    """Two passes over the stream: find max-abs, then fill the bins.

    An all-zero stream is flagged via ``all_zero``; the calibration driver
    falls back to scale 1.0 for that layer.
    """
    if not tensors:
        raise CalibrationError("histogram collection needs at least one tensor")
    max_abs = 0.0
    count = 0
    for x in tensors:
        count += x.size
        if x.size:
            max_abs = max(max_abs, float(np.abs(x).max()))
    bins = np.zeros(N_BINS, dtype=np.int64)
    if max_abs > 0.0:
        for x in tensors:
            bins += np.bincount(_bin_indices(np.asarray(x).ravel(), max_abs),
                                minlength=N_BINS)
    return CalibrationHistogram(bins=bins, max_abs=max_abs, sample_count=count)


def merge_histograms(a: CalibrationHistogram, b: CalibrationHistogram) -> CalibrationHistogram:
    if a.max_abs != b.max_abs:
        raise CalibrationError(
            f"cannot merge histograms with different max-abs: {a.max_abs} vs {b.max_abs}")
    return CalibrationHistogram(bins=a.bins + b.bins, max_abs=a.max_abs,
                                sample_count=a.sample_count + b.sample_count)


# --------------------------------------------------------------------------
# Entropy (KL) calibration
# --------------------------------------------------------------------------

def _xlogx(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v, dtype=np.float64)
    nz = v > 0
    out[nz] = v[nz] * np.log(v[nz])
    return out


def kl_calibrate(hist: CalibrationHistogram) -> tuple[float, float]:
    """Pick the clip threshold minimizing KL(reference || re-quantized).

    For each candidate bin count i in [128, 2048]: the reference keeps bins
    [0, i) with all tail mass folded into bin i-1; the candidate re-bins the
    *unfolded* bins [0, i) to 128 equal-width levels (the last level absorbs
    the remainder when i is not a multiple of 128) and spreads each level's
    mass uniformly over the reference's nonzero bins in that level; both are
    normalized. Building the candidate without the folded tail is what makes
    aggressive clipping expensive: the reference keeps the clipped mass at
    bin i-1 while the candidate cannot represent it. Smallest i wins ties.
    Returns (threshold, scale): threshold = (i + 0.5) * bin_width, scale = T/127.

    The scan uses a prefix-sum reformulation: with p = ref/N, q = expanded/M,
    KL * N = sum_b ref_b*ln(ref_b)
             - sum_j refmass_j*(ln(merged_j) - ln(count_j)) + N*ln(M/N),
    since every reference-nonzero bin of level j holds merged_j / count_j of
    candidate mass. Candidates sharing m = i // 128 share their first 127
    segments (where refmass == merged), so each m-block evaluates as one
    vector operation over its candidates.
    """
    if hist.sample_count <= 0 or hist.all_zero or hist.bins.sum() == 0:
        raise CalibrationError("cannot calibrate an empty histogram")
    c = hist.bins.astype(np.float64)
    total = c.sum()
    prefix = np.concatenate(([0.0], np.cumsum(c)))
    prefix_xlogx = np.concatenate(([0.0], np.cumsum(_xlogx(c))))
    prefix_nz = np.concatenate(([0], np.cumsum(c > 0)))

    best_i = -1
    best_kl = np.inf
    for m in range(1, N_BINS // N_LEVELS + 1):
        lo = max(N_LEVELS, N_LEVELS * m)
        hi = min(N_BINS, N_LEVELS * (m + 1) - 1) if m < N_BINS // N_LEVELS else N_BINS
        if lo > hi:
            continue
        starts = np.arange(N_LEVELS - 1, dtype=np.int64) * m
        seg_mass = prefix[starts + m] - prefix[starts]
        seg_cnt = (prefix_nz[starts + m] - prefix_nz[starts]).astype(np.float64)
        nzs = seg_mass > 0
        t2_shared = float(np.sum(seg_mass[nzs]
                                 * (np.log(seg_mass[nzs]) - np.log(seg_cnt[nzs]))))
        cand = np.arange(lo, hi + 1, dtype=np.int64)
        tails = total - prefix[cand]
        last_vals = c[cand - 1] + tails
        t1 = prefix_xlogx[cand - 1] + _xlogx(last_vals)
        last_start = (N_LEVELS - 1) * m
        ref_last = total - prefix[last_start]       # reference mass incl. tail
        merged_last = prefix[cand] - prefix[last_start]  # candidate mass, no tail
        cand_total = prefix[cand]                   # M = mass kept before folding
        last_cnt = (prefix_nz[cand] - prefix_nz[last_start]).astype(np.float64)
        last_cnt += ((tails > 0) & (c[cand - 1] == 0))  # tail creates support
        with np.errstate(divide="ignore"):
            t2_last = np.where(
                merged_last > 0,
                ref_last * (np.log(np.maximum(merged_last, 1e-300)) - np.log(last_cnt)),
                -np.inf if ref_last > 0 else 0.0)
            norm_term = total * (np.log(cand_total) - np.log(total))
        kl = (t1 - t2_shared - t2_last + norm_term) / total
        kl = np.where(np.isneginf(-kl), np.inf, kl)  # empty candidate support
        kl = np.maximum(kl, 0.0)
        kl[kl < KL_ZERO_SNAP] = 0.0  # lossless re-binning ties resolve exactly
        j = int(np.argmin(kl))  # first minimum: smallest i within the block
        if kl[j] < best_kl:
            best_kl = float(kl[j])
            best_i = int(cand[j])
    threshold = (best_i + 0.5) * hist.bin_width
    return threshold, threshold / 127.0


# --------------------------------------------------------------------------
# Precision configuration and application
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PrecisionConfig:
    """Mode per model component; every component must be assigned."""

    modes: tuple[tuple[str, str], ...]  # ((component, mode), ...) in COMPONENTS order

    @classmethod
    def make(cls, **kwargs: str) -> "PrecisionConfig":
        missing = [c for c in COMPONENTS if c not in kwargs]
        if missing:
            raise ValueError(f"precision config missing components: {missing}")
        extra = [c for c in kwargs if c not in COMPONENTS]
        if extra:
            raise ValueError(f"unknown components: {extra}")
        for c, m in kwargs.items():
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r} for {c}")
        return cls(modes=tuple((c, kwargs[c]) for c in COMPONENTS))

    @classmethod
    def uniform(cls, mode: str) -> "PrecisionConfig":
        return cls.make(**{c: mode for c in COMPONENTS})

    def mode_of(self, component: str) -> str:
        return dict(self.modes)[component]

    @property
    def name(self) -> str:
        return ",".join(f"{c}={m}" for c, m in self.modes)


def quantize_graph(graph: LayerGraph, mode: str, component: str,
                   scales: dict[str, float] | None) -> LayerGraph:
    """Return a copy of ``graph`` carrying the precision annotations for ``mode``."""
    if mode == "FP32":
        return graph
    if mode == "FP16":
        params = {name: fp16_emulate(p) for name, p in graph.params.items()}
        g = graph.with_params(params)
        g.input_quant = {name: TensorQuant("fp16") for name in graph.inputs}
        g.output_quant = {layer.name: TensorQuant("fp16") for layer in graph.layers}
        return g
    if mode != "INT8":
        raise ValueError(f"unknown precision mode {mode!r}")
    if scales is None:
        raise CalibrationError(f"INT8 conversion of {component!r} requires calibration scales")
    params = dict(graph.params)
    for layer in graph.layers:
        if layer.weight is not None:
            params[layer.weight] = fake_quant_weight_per_channel(params[layer.weight])
    g = graph.with_params(params)
    input_quant, output_quant = {}, {}
    for name in graph.inputs:
        key = f"{component}/in.{name}"
        if key not in scales:
            raise CalibrationError(f"missing calibration scale for {key}")
        input_quant[name] = TensorQuant("int8", scales[key])
    for layer in graph.layers:
        key = f"{component}/{layer.name}"
        if key not in scales:
            raise CalibrationError(f"missing calibration scale for {key}")
        output_quant[layer.name] = TensorQuant("int8", scales[key])
    g.input_quant = input_quant
    g.output_quant = output_quant
    return g


def fallback_scales(model) -> dict[str, float]:
    """Scale 1.0 for every tensor: the zero-calibration-images fallback."""
    out: dict[str, float] = {}
    for component in COMPONENTS:
        graph: LayerGraph = getattr(model, component)
        for name in graph.inputs:
            out[f"{component}/in.{name}"] = 1.0
        for layer in graph.layers:
            out[f"{component}/{layer.name}"] = 1.0
    return out


def calibrate_scales(model, frames: list[Array]) -> dict[str, float]:
    """Entropy-calibrated activation scales from calibration images.

    Runs the FP32 keyframe path (plus the flow net on consecutive-frame C3
    pairs) over the calibration set, histogramming every graph input and layer
    output. With no frames at all, every tensor falls back to scale 1.0.
    """
    if not frames:
        warnings.warn("calibrating with zero images: every scale falls back to 1.0")
        return fallback_scales(model)

    acts = _collect_activations(model, frames)
    out: dict[str, float] = {}
    for key, tensors in acts.items():
        hist = collect_histogram(tensors)
        if hist.all_zero:
            warnings.warn(f"{key}: all-zero activations, falling back to scale 1.0")
            out[key] = 1.0
        else:
            _, scale = kl_calibrate(hist)
            out[key] = scale
    return out


def _collect_activations(model, frames: list[Array]) -> dict[str, list[Array]]:
    from .graph import run_graph

    acts: dict[str, list[Array]] = {}

    def record(component: str, graph: LayerGraph, feeds: dict[str, Array],
               outputs: tuple[str, ...]) -> dict[str, Array]:
        result, tape = run_graph(graph, feeds, outputs=outputs, record_tape=True)
        for name in graph.inputs:
            if name in feeds:
                acts.setdefault(f"{component}/in.{name}", []).append(feeds[name])
        for name in tape.executed:
            acts.setdefault(f"{component}/{name}", []).append(tape.values[name])
        return result

    prev_c3: Array | None = None
    for frame in frames:
        bb = record("backbone", model.backbone, {"image": frame},
                    ("c1", "c2", "c3", "c4", "c5"))
        fp = record("fpn", model.fpn, {"c3": bb["c3"], "c4": bb["c4"], "c5": bb["c5"]},
                    ("p3", "p4", "p5", "p6", "p7"))
        record("protonet", model.protonet, {"p3": fp["p3"]}, ("protos",))
        record("predhead", model.predhead,
               {lvl: fp[lvl] for lvl in ("p3", "p4", "p5", "p6", "p7")},
               model.predhead.outputs)
        key_c3 = prev_c3 if prev_c3 is not None else bb["c3"]
        record("flownet", model.flownet, {"c3_key": key_c3, "c3_cur": bb["c3"]},
               ("flow",))
        prev_c3 = bb["c3"]
    return acts


def apply_precision(model, config: PrecisionConfig, scales: dict[str, float] | None = None):
    """New model with each component's graph converted to its configured mode."""
    replacements = {
        component: quantize_graph(getattr(model, component), config.mode_of(component),
                                  component, scales)
        for component in COMPONENTS
    }
    return model.replace_graphs(**replacements)


# --------------------------------------------------------------------------
# Mixed-precision grid search
# --------------------------------------------------------------------------

@dataclass
class SearchRow:
    config: PrecisionConfig
    mask_ap: float
    box_ap: float
    cost: float
    pareto: bool = False


def precision_cost(config: PrecisionConfig, component_flops: dict[str, int]) -> float:
    """Weighted FLOPs: INT8 x0.25, FP16 x0.5, FP32 x1.0 (throughput proxy)."""
    return sum(component_flops[c] * MODE_COST_WEIGHT[m] for c, m in config.modes)


def pareto_front(rows: list[SearchRow]) -> None:
    """Mark rows not dominated by any other (lower-or-equal cost, higher-or-equal AP)."""
    for r in rows:
        r.pareto = not any(
            (o.cost <= r.cost and o.mask_ap >= r.mask_ap
             and (o.cost < r.cost or o.mask_ap > r.mask_ap))
            for o in rows if o is not r
        )


def search_precision(grid: dict[str, tuple[str, ...]], evaluator,
                     component_flops: dict[str, int]) -> list[SearchRow]:
    """Evaluate every configuration in the per-component mode grid.

    ``evaluator(config) -> (mask_ap, box_ap)``. Rows are sorted by cost, then
    AP descending, then config name; the Pareto frontier is marked in place.
    """
    for c in COMPONENTS:
        if c not in grid:
            raise ValueError(f"grid missing component {c!r}")
    rows: list[SearchRow] = []
    for combo in product(*(grid[c] for c in COMPONENTS)):
        config = PrecisionConfig.make(**dict(zip(COMPONENTS, combo)))
        mask_ap, box_ap = evaluator(config)
        rows.append(SearchRow(config=config, mask_ap=mask_ap, box_ap=box_ap,
                              cost=precision_cost(config, component_flops)))
    rows.sort(key=lambda r: (r.cost, -r.mask_ap, r.config.name))
    pareto_front(rows)
    return rows
