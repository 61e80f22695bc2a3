"""Bit-exact FP16 and INT8 numeric emulation on FP32 tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Array, as_f32

INT8_LEVELS = 127  # symmetric signed range [-127, 127]
FP16_MAX = 65504.0


class QuantizationError(ValueError):
    pass


def fp16_emulate(x) -> Array:
    """Round every value to the nearest IEEE binary16 (ties to even), widen back.

    Values beyond the binary16 rounding range overflow to signed infinity,
    e.g. 70000.0 -> +inf; the emulation is idempotent.
    """
    return as_f32(x).astype(np.float16).astype(np.float32)


@dataclass(frozen=True)
class QuantizedTensor:
    """INT8 codes plus the real value of one code step; value = code * scale."""

    codes: Array  # int8, any rank
    scale: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def _round_half_away(x: Array) -> Array:
    # np.round is half-to-even; INT8 quantization wants half away from zero.
    return np.trunc(x + np.copysign(np.float32(0.5), x))


def int8_quantize(x, scale: float) -> QuantizedTensor:
    """code = clamp(round_half_away_from_zero(x / scale), -127, 127)."""
    if not scale > 0:
        raise QuantizationError(f"scale must be positive, got {scale}")
    x = as_f32(x)
    codes = _round_half_away(x / np.float32(scale))
    codes = np.clip(codes, -INT8_LEVELS, INT8_LEVELS).astype(np.int8)
    return QuantizedTensor(codes=codes, scale=float(scale))


def int8_dequantize(q: QuantizedTensor) -> Array:
    return q.codes.astype(np.float32) * np.float32(q.scale)


def fake_quant_int8(x, scale: float) -> Array:
    """Quantize-then-dequantize, emulating INT8 activation precision in FP32."""
    return int8_dequantize(int8_quantize(x, scale))


def weight_channel_scales(weight: Array) -> Array:
    """Per-output-channel max-abs scales; all-zero channels fall back to 1.0."""
    flat = np.abs(weight.reshape(weight.shape[0], -1))
    maxabs = flat.max(axis=1)
    scales = maxabs / np.float32(INT8_LEVELS)
    return np.where(maxabs > 0, scales, np.float32(1.0)).astype(np.float32)


def fake_quant_weight_per_channel(weight: Array) -> Array:
    """Fake-quantize a (Cout, ...) weight tensor with per-output-channel scales."""
    weight = as_f32(weight)
    scales = weight_channel_scales(weight)
    view = scales.reshape((-1,) + (1,) * (weight.ndim - 1))
    codes = np.clip(_round_half_away(weight / view), -INT8_LEVELS, INT8_LEVELS)
    return (codes * view).astype(np.float32)
