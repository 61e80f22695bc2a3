"""FP16 emulation and INT8 quantize/dequantize tests."""
from __future__ import annotations

import numpy as np
import pytest

from warpseg.numerics import (QuantizationError, fake_quant_int8, fake_quant_weight_per_channel,
                              fp16_emulate, int8_dequantize, int8_quantize,
                              weight_channel_scales)


class TestFp16:
    def test_exactly_representable(self):
        assert fp16_emulate(np.array([1.0], np.float32))[0] == 1.0

    def test_rounds_2049_down(self):
        # binary16 has an 11-bit significand: spacing is 2 at this magnitude
        assert fp16_emulate(np.array([2049.0], np.float32))[0] == 2048.0

    def test_overflow_to_signed_infinity(self):
        out = fp16_emulate(np.array([70000.0, -70000.0], np.float32))
        assert out[0] == np.inf and out[1] == -np.inf

    def test_max_finite_preserved(self):
        assert fp16_emulate(np.array([65504.0], np.float32))[0] == 65504.0

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        x = (rng.standard_normal(1000) * rng.choice([1e-3, 1.0, 1e3], 1000)).astype(np.float32)
        once = fp16_emulate(x)
        twice = fp16_emulate(once)
        np.testing.assert_array_equal(once, twice)

    def test_ties_to_even(self):
        # 2049 is exactly between 2048 and 2050; even significand wins (2048)
        assert fp16_emulate(np.array([2051.0], np.float32))[0] == 2052.0


class TestInt8:
    def test_basic_example(self):
        q = int8_quantize(np.array([1.2], np.float32), 0.5)
        assert q.codes[0] == 2
        assert int8_dequantize(q)[0] == 1.0

    def test_zero(self):
        q = int8_quantize(np.array([0.0], np.float32), 0.5)
        assert q.codes[0] == 0
        assert int8_dequantize(q)[0] == 0.0

    def test_saturation(self):
        q = int8_quantize(np.array([1000.0, -1000.0], np.float32), 0.5)
        assert q.codes[0] == 127 and q.codes[1] == -127
        assert int8_dequantize(q)[0] == 63.5

    def test_half_away_from_zero(self):
        q = int8_quantize(np.array([0.5, -0.5, 1.5, -1.5], np.float32), 1.0)
        np.testing.assert_array_equal(q.codes, [1, -1, 2, -2])

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(QuantizationError):
            int8_quantize(np.array([1.0], np.float32), 0.0)
        with pytest.raises(QuantizationError):
            int8_quantize(np.array([1.0], np.float32), -0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_roundtrip_error_bound(self, seed):
        rng = np.random.default_rng(seed)
        scale = float(rng.uniform(0.01, 2.0))
        x = rng.uniform(-127 * scale, 127 * scale, size=500).astype(np.float32)
        err = np.abs(fake_quant_int8(x, scale) - x)
        assert err.max() <= scale / 2 + 1e-6

    def test_shape_preserved(self):
        x = np.zeros((2, 3, 4), np.float32)
        assert int8_quantize(x, 1.0).shape == (2, 3, 4)


class TestWeightQuant:
    def test_per_channel_scales(self):
        w = np.array([[[[1.0]], [[-2.0]]], [[[0.0]], [[0.0]]]], np.float32)  # [2,2,1,1]
        scales = weight_channel_scales(w)
        assert scales[0] == pytest.approx(2.0 / 127)
        assert scales[1] == 1.0  # all-zero channel falls back

    def test_fake_quant_error_bound_per_channel(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        wq = fake_quant_weight_per_channel(w)
        scales = weight_channel_scales(w)
        err = np.abs(wq - w).reshape(4, -1).max(axis=1)
        assert (err <= scales / 2 + 1e-7).all()
