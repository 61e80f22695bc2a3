"""Pipeline tests: scheduling, cache discipline, FLOP charging, determinism."""
from __future__ import annotations

import numpy as np
import pytest

from warpseg.model import build_model, forward_image
from warpseg.pipeline import (KeyframeSchedule, benchmark, keyframe_flags,
                              records_from_results, run_video)
from warpseg.synthdata import SceneSpec, gen_video

BACKBONE_STAGES = ("C1", "C2", "C3", "C4", "C5")


@pytest.fixture(scope="module")
def model():
    return build_model(seed=21)


@pytest.fixture(scope="module")
def video():
    return gen_video(4, SceneSpec(frames=10, min_speed=1))


class TestKeyframeFlags:
    def test_interval_five(self):
        flags = keyframe_flags(12, KeyframeSchedule(5))
        assert [i for i, f in enumerate(flags) if f] == [0, 5, 10]

    def test_interval_one(self):
        assert keyframe_flags(4, KeyframeSchedule(1)) == [True] * 4

    def test_single_frame(self):
        assert keyframe_flags(1, KeyframeSchedule(7)) == [True]

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            keyframe_flags(0, KeyframeSchedule(5))
        with pytest.raises(ValueError):
            KeyframeSchedule(0)


class TestRunVideo:
    def test_single_frame_matches_image_pipeline(self, model, video):
        results = run_video(model, video.frames[:1], KeyframeSchedule(5))
        assert len(results) == 1 and results[0].is_keyframe
        _, _, dets = forward_image(model, video.frames[0], score_thresh=0.3,
                                   top_k=10)
        assert len(results[0].detections) == len(dets)
        for a, b in zip(results[0].detections, dets):
            assert a.class_id == b.class_id and a.score == b.score
            np.testing.assert_array_equal(a.box, b.box)

    def test_interval_one_equals_independent_full_compute(self, model, video):
        results = run_video(model, video.frames, KeyframeSchedule(1))
        assert all(r.is_keyframe for r in results)
        for t, r in enumerate(results):
            _, _, dets = forward_image(model, video.frames[t], score_thresh=0.3,
                                       top_k=10)
            assert len(r.detections) == len(dets)
            for a, b in zip(r.detections, dets):
                np.testing.assert_array_equal(a.box, b.box)

    def test_nonkeyframe_flops_strictly_below_keyframe(self, model, video):
        results = run_video(model, video.frames, KeyframeSchedule(5))
        key = [r.total_flops for r in results if r.is_keyframe]
        non = [r.total_flops for r in results if not r.is_keyframe]
        assert max(non) < min(key)

    def test_nonkeyframes_charge_no_c4_c5(self, model, video):
        results = run_video(model, video.frames, KeyframeSchedule(5))
        for r in results:
            if not r.is_keyframe:
                assert "C4" not in r.flops_by_stage
                assert "C5" not in r.flops_by_stage
                assert "flow" in r.flops_by_stage

    def test_cache_provenance_most_recent_keyframe(self, model, video):
        results = run_video(model, video.frames, KeyframeSchedule(4))
        for r in results:
            want = (r.frame_index // 4) * 4
            assert r.cache_key_index == want

    def test_deterministic_bitwise(self, model, video):
        a = run_video(model, video.frames, KeyframeSchedule(5))
        b = run_video(model, video.frames, KeyframeSchedule(5))
        for ra, rb in zip(a, b):
            assert ra.flops_by_stage == rb.flops_by_stage
            assert len(ra.detections) == len(rb.detections)
            for da, db in zip(ra.detections, rb.detections):
                assert da.score == db.score
                np.testing.assert_array_equal(da.box, db.box)
            for ma, mb in zip(ra.masks, rb.masks):
                np.testing.assert_array_equal(ma, mb)

    def test_empty_sequence_rejected(self, model):
        with pytest.raises(ValueError, match="empty"):
            run_video(model, [], KeyframeSchedule(5))

    def test_measured_backbone_flops_match_cost_model(self, model, video):
        from warpseg.costmodel import backbone_flops
        results = run_video(model, video.frames, KeyframeSchedule(5))
        full = backbone_flops(model.spec, 64, 64, "C5")
        partial = backbone_flops(model.spec, 64, 64, "C3")
        for r in results:
            got = sum(r.flops_by_stage.get(s, 0) for s in BACKBONE_STAGES)
            assert got == (full if r.is_keyframe else partial)


class TestBenchmark:
    def test_rows_and_records(self, model, video):
        rows = benchmark(model, [video], [KeyframeSchedule(1), KeyframeSchedule(5)],
                         [("FP32", None, None)], flow_cases=(True, False))
        assert len(rows) == 4
        rec = rows[0].to_record()
        assert set(rec) == {"interval", "config", "use_flow", "mask_ap", "box_ap",
                            "mean_flops_per_frame", "backbone_flops_per_frame"}

    def test_amortized_backbone_ratio_exact(self, model, video):
        from warpseg.costmodel import backbone_flops
        rows = benchmark(model, [video], [KeyframeSchedule(1), KeyframeSchedule(5)],
                         [("FP32", None, None)])
        by_interval = {r.interval: r for r in rows}
        full = backbone_flops(model.spec, 64, 64, "C5")
        partial = backbone_flops(model.spec, 64, 64, "C3")
        assert by_interval[1].backbone_flops_per_frame == full
        want = (2 * full + 8 * partial) / 10  # 10 frames, keyframes at 0 and 5
        assert by_interval[5].backbone_flops_per_frame == want
        assert want / full == (full + 4 * partial) / (5 * full)

    def test_records_pair_predictions_with_gt(self, model, video):
        results = [run_video(model, video.frames, KeyframeSchedule(5))]
        preds, gts = records_from_results([video], results)
        assert len(gts) == video.n_frames * len(video.instances)
        assert all(g.mask.shape == (64, 64) for g in gts)
        assert all(p.mask.shape == (64, 64) for p in preds)
