"""Flow estimator tests: architecture contracts, EPE, training behavior."""
from __future__ import annotations

import numpy as np
import pytest

from warpseg.flownet import (FlowField, FlowNetConfig, build_flow_graph, epe_loss,
                             epe_loss_grad, flow_forward, flow_macs)
from warpseg.graph import GraphError


def _c3(seed=0, shape=(24, 8, 8)):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class TestFlowForward:
    def test_output_shape(self):
        graph = build_flow_graph(FlowNetConfig(), 24, seed=1)
        flow = flow_forward(graph, _c3(0), _c3(1))
        assert flow.values.shape == (2, 8, 8)
        assert flow.stride == 8

    def test_zero_final_layer_gives_zero_flow(self):
        graph = build_flow_graph(FlowNetConfig(), 24, seed=1)
        graph.params["flow.predict.weight"][:] = 0.0
        graph.params["flow.predict.bias"][:] = 0.0
        x = _c3(2)
        flow = flow_forward(graph, x, x)
        assert not flow.values.any()

    def test_shape_mismatch_rejected(self):
        graph = build_flow_graph(FlowNetConfig(), 24, seed=1)
        with pytest.raises(GraphError, match="mismatch"):
            flow_forward(graph, _c3(0), _c3(1, (24, 4, 4)))

    def test_deterministic_bitwise(self):
        graph = build_flow_graph(FlowNetConfig(), 24, seed=3)
        a = flow_forward(graph, _c3(0), _c3(1)).values
        b = flow_forward(graph, _c3(0), _c3(1)).values
        np.testing.assert_array_equal(a, b)

    def test_channel_reduction_cost_monotonic(self):
        shape = (24, 8, 8)
        costs = [flow_macs(FlowNetConfig(reduction=r), shape) for r in (0.25, 0.5, 1.0)]
        assert costs[0] < costs[1] < costs[2]

    def test_eighth_reduction_warns(self):
        with pytest.warns(UserWarning, match="1/8"):
            FlowNetConfig(reduction=0.125)

    def test_reduction_leaving_no_channels_rejected(self):
        cfg = FlowNetConfig(reduction=0.25)
        with pytest.raises(ValueError, match="channels"):
            cfg.reduced_channels(2)

    def test_invalid_reduction_rejected(self):
        with pytest.raises(ValueError):
            FlowNetConfig(reduction=0.3)


class TestEpe:
    def _field(self, v):
        return FlowField(values=np.asarray(v, np.float32), stride=8)

    def test_equal_fields_zero(self):
        v = np.random.default_rng(0).uniform(-2, 2, (2, 4, 4)).astype(np.float32)
        assert epe_loss(self._field(v), self._field(v)) == 0.0

    def test_3_4_5_triangle(self):
        pred = np.zeros((2, 4, 4), np.float32)
        pred[0] = 3.0
        pred[1] = 4.0
        gt = np.zeros((2, 4, 4), np.float32)
        assert epe_loss(self._field(pred), self._field(gt)) == pytest.approx(5.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(-3, 3, (2, 5, 7)).astype(np.float32)
        b = rng.uniform(-3, 3, (2, 5, 7)).astype(np.float32)
        want = 0.0
        for y in range(5):
            for x in range(7):
                du = float(a[0, y, x]) - float(b[0, y, x])
                dv = float(a[1, y, x]) - float(b[1, y, x])
                want += (du * du + dv * dv) ** 0.5
        want /= 35
        assert epe_loss(self._field(a), self._field(b)) == pytest.approx(want, abs=1e-6)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(-1, 1, (2, 4, 4)).astype(np.float32)
        b = a.copy()
        b[0, 0, 0] += 0.5
        assert epe_loss(self._field(a), self._field(b)) > 0.0

    def test_stride_mismatch_rejected(self):
        a = FlowField(values=np.zeros((2, 4, 4), np.float32), stride=8)
        b = FlowField(values=np.zeros((2, 4, 4), np.float32), stride=16)
        with pytest.raises(GraphError, match="stride"):
            epe_loss(a, b)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-2, 2, (2, 3, 3)).astype(np.float32)
        b = rng.uniform(-2, 2, (2, 3, 3)).astype(np.float32)
        _, grad = epe_loss_grad(self._field(a), self._field(b))
        eps = 1e-3
        for idx in np.ndindex(a.shape):
            base = a.copy()
            base[idx] += eps
            hi = epe_loss(self._field(base), self._field(b))
            base[idx] -= 2 * eps
            lo = epe_loss(self._field(base), self._field(b))
            fd = (hi - lo) / (2 * eps)
            assert grad[idx] == pytest.approx(fd, abs=2e-3)


class TestFlowTraining:
    def _model_and_pairs(self, n_pairs=4, seed=0):
        from warpseg.model import build_model
        from warpseg.synthdata import SceneSpec, gen_flow_pairs
        model = build_model(seed=seed)
        pairs = gen_flow_pairs(seed, n_pairs, model.backbone,
                               SceneSpec(noise_sigma=0.0), max_shift=6)
        return model, pairs

    def test_zero_lr_leaves_params_bitwise(self):
        from warpseg.training import train_flow
        model, pairs = self._model_and_pairs()
        before = {k: v.copy() for k, v in model.flownet.params.items()}
        train_flow(model, pairs, steps=3, base_lr=0.0, seed=1)
        for k, v in model.flownet.params.items():
            np.testing.assert_array_equal(v, before[k])

    def test_overfit_single_pair(self):
        from warpseg.training import mean_flow_epe, train_flow
        model, pairs = self._model_and_pairs(n_pairs=1, seed=2)
        initial = mean_flow_epe(model, pairs)
        train_flow(model, pairs, steps=200, base_lr=0.05, batch_size=1, seed=2)
        final = mean_flow_epe(model, pairs)
        assert final < initial

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        from warpseg.training import TrainingDiverged, train_flow
        model, pairs = self._model_and_pairs(seed=3)
        with pytest.raises(TrainingDiverged):
            train_flow(model, pairs, steps=200, base_lr=1e4, seed=3)

    def test_empty_dataset_rejected(self):
        from warpseg.model import build_model
        from warpseg.training import train_flow
        with pytest.raises(ValueError, match="non-empty"):
            train_flow(build_model(seed=0), [], steps=1)
