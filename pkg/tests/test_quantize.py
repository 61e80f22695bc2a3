"""Quantizer tests: histogram collection, KL calibration against a brute-force
oracle, precision application, and the grid search."""
from __future__ import annotations

import numpy as np
import pytest

from warpseg.quantize import (N_BINS, N_LEVELS, CalibrationError, CalibrationHistogram,
                              PrecisionConfig, collect_histogram, kl_calibrate,
                              merge_histograms, pareto_front, precision_cost,
                              search_precision, SearchRow, quantize_graph)


from kl_oracle import oracle_kl_threshold


def _hist_from_bins(bins, max_abs=1.0):
    b = np.zeros(N_BINS, dtype=np.int64)
    b[:len(bins)] = bins
    return CalibrationHistogram(bins=b, max_abs=max_abs,
                                sample_count=int(b.sum()))


def _chosen_index(hist):
    t, _ = kl_calibrate(hist)
    return int(round(t / hist.bin_width - 0.5))


class TestCollectHistogram:
    def test_constant_stream_tops_last_bin(self):
        tensors = [np.full(10, 0.5, np.float32) for _ in range(10)]
        h = collect_histogram(tensors)
        assert h.max_abs == 0.5
        assert h.bins[N_BINS - 1] == 100
        assert h.bins.sum() == 100
        assert h.sample_count == 100

    def test_merge_doubles_counts(self):
        h = collect_histogram([np.random.default_rng(0).standard_normal(100)
                               .astype(np.float32)])
        m = merge_histograms(h, h)
        np.testing.assert_array_equal(m.bins, 2 * h.bins)
        assert m.sample_count == 2 * h.sample_count

    def test_merge_requires_same_max(self):
        a = collect_histogram([np.array([1.0], np.float32)])
        b = collect_histogram([np.array([2.0], np.float32)])
        with pytest.raises(CalibrationError, match="max-abs"):
            merge_histograms(a, b)

    def test_matches_naive_binning_oracle(self):
        rng = np.random.default_rng(42)
        tensors = [rng.standard_normal(257).astype(np.float32) for _ in range(3)]
        h = collect_histogram(tensors)
        width = h.max_abs / N_BINS
        want = np.zeros(N_BINS, dtype=np.int64)
        for x in np.concatenate([t.ravel() for t in tensors]):
            idx = min(int(abs(float(x)) / width), N_BINS - 1)
            want[idx] += 1
        np.testing.assert_array_equal(h.bins, want)

    def test_all_zero_stream_flagged(self):
        h = collect_histogram([np.zeros(16, np.float32)])
        assert h.all_zero
        with pytest.raises(CalibrationError):
            kl_calibrate(h)

    def test_empty_stream_rejected(self):
        with pytest.raises(CalibrationError):
            collect_histogram([])


class TestKlCalibrate:
    def test_mass_within_first_128_bins_lossless(self):
        rng = np.random.default_rng(1)
        bins = rng.integers(1, 50, size=100)
        h = _hist_from_bins(bins)
        t, scale = kl_calibrate(h)
        assert _chosen_index(h) == N_LEVELS
        assert t == pytest.approx((N_LEVELS + 0.5) * h.bin_width)
        assert scale == pytest.approx(t / 127.0)

    def test_point_mass_tie_breaks_to_smallest(self):
        for j in (0, 5, 100, 127):
            h = _hist_from_bins([0] * j + [1000])
            assert _chosen_index(h) == N_LEVELS, f"point mass at {j}"

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        kind = seed % 3
        if kind == 0:
            data = rng.standard_normal(4000) * rng.uniform(0.5, 2.0)
        elif kind == 1:
            data = np.concatenate([rng.standard_normal(3000),
                                   rng.uniform(-8, 8, 50)])  # heavy tail
        else:
            data = rng.laplace(0, 1.0, 2500)
        h = collect_histogram([data.astype(np.float32)])
        assert _chosen_index(h) == oracle_kl_threshold(h.bins)

    def test_empty_histogram_rejected(self):
        h = CalibrationHistogram(bins=np.zeros(N_BINS, np.int64), max_abs=1.0,
                                 sample_count=0)
        with pytest.raises(CalibrationError):
            kl_calibrate(h)


class TestPrecisionConfig:
    def test_requires_every_component(self):
        with pytest.raises(ValueError, match="missing"):
            PrecisionConfig.make(backbone="FP32")

    def test_unknown_mode_rejected(self):
        kwargs = {c: "FP32" for c in ("backbone", "fpn", "protonet", "predhead",
                                      "flownet")}
        kwargs["fpn"] = "INT4"
        with pytest.raises(ValueError, match="unknown mode"):
            PrecisionConfig.make(**kwargs)

    def test_uniform(self):
        cfg = PrecisionConfig.uniform("FP16")
        assert all(m == "FP16" for _, m in cfg.modes)


class TestQuantizeGraph:
    def _graph(self):
        from warpseg.graph import Layer, LayerGraph
        rng = np.random.default_rng(0)
        w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        return LayerGraph(("x",), [Layer("y", "conv2d", ("x",), "w", "b", padding=1)],
                          {"w": w, "b": np.zeros(2, np.float32)}, ("y",))

    def test_fp32_mode_is_identity(self):
        from warpseg.graph import run_graph
        g = self._graph()
        q = quantize_graph(g, "FP32", "backbone", None)
        x = np.random.default_rng(1).standard_normal((1, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(run_graph(g, {"x": x})["y"],
                                      run_graph(q, {"x": x})["y"])

    def test_fp16_representable_weights_unchanged(self):
        g = self._graph()
        g.params["w"][:] = np.float32(0.5)  # exactly representable in binary16
        q = quantize_graph(g, "FP16", "backbone", None)
        np.testing.assert_array_equal(q.params["w"], g.params["w"])

    def test_int8_requires_scales(self):
        g = self._graph()
        with pytest.raises(CalibrationError, match="scale"):
            quantize_graph(g, "INT8", "backbone", {"backbone/in.x": 0.1})

    def test_int8_error_bound_through_linear_layer(self):
        """Input fake-quantization error propagates bounded by the weight L1 norm."""
        from warpseg.graph import conv2d, run_graph
        from warpseg.numerics import fake_quant_int8
        rng = np.random.default_rng(7)
        g = self._graph()
        x = rng.uniform(-1, 1, (1, 6, 6)).astype(np.float32)
        scale = 1.0 / 127
        xq = fake_quant_int8(x, scale)
        clean = conv2d(x, g.params["w"], g.params["b"], padding=1)
        noisy = conv2d(xq, g.params["w"], g.params["b"], padding=1)
        l1 = np.abs(g.params["w"]).sum(axis=(1, 2, 3))  # per out-channel
        bound = (scale / 2) * l1
        err = np.abs(noisy - clean).reshape(2, -1).max(axis=1)
        assert (err <= bound + 1e-6).all()


class TestSearch:
    COMPS = ("backbone", "fpn", "protonet", "predhead", "flownet")

    def test_grid_enumeration(self):
        grid = {c: ("FP16",) for c in self.COMPS}
        grid["backbone"] = ("FP16", "INT8")
        grid["fpn"] = ("FP16", "INT8")
        flops = {c: 100 for c in self.COMPS}
        rows = search_precision(grid, lambda cfg: (0.5, 0.5), flops)
        assert len(rows) == 4
        assert len({r.config.name for r in rows}) == 4

    def test_constant_evaluator_single_pareto_point(self):
        grid = {c: ("FP16", "INT8") for c in self.COMPS}
        flops = {c: 100 for c in self.COMPS}
        rows = search_precision(grid, lambda cfg: (0.42, 0.42), flops)
        front = [r for r in rows if r.pareto]
        assert len(front) == 1
        assert front[0].cost == min(r.cost for r in rows)

    def test_pareto_matches_dominance_oracle(self):
        rng = np.random.default_rng(3)
        rows = [SearchRow(config=PrecisionConfig.uniform("FP32"),
                          mask_ap=float(rng.uniform(0, 1)), box_ap=0.0,
                          cost=float(rng.integers(1, 100))) for _ in range(40)]
        pareto_front(rows)
        for r in rows:
            dominated = any(
                o.cost <= r.cost and o.mask_ap >= r.mask_ap
                and (o.cost < r.cost or o.mask_ap > r.mask_ap)
                for o in rows if o is not r)
            assert r.pareto == (not dominated)

    def test_cost_weights(self):
        flops = {c: 1000 for c in self.COMPS}
        assert precision_cost(PrecisionConfig.uniform("FP32"), flops) == 5000
        assert precision_cost(PrecisionConfig.uniform("FP16"), flops) == 2500
        assert precision_cost(PrecisionConfig.uniform("INT8"), flops) == 1250
