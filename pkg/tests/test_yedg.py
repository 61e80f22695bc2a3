"""Weight-bundle and tensor-file format tests: bit-exact round trips."""
from __future__ import annotations

import numpy as np
import pytest

from warpseg.yedg import (FormatError, dump_tensor, dump_weights, load_tensor, load_weights,
                          parse_weights, rle_decode, rle_encode, save_tensor, save_weights)


class TestWeights:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "backbone.c1.0.weight": rng.standard_normal((8, 3, 3, 3)).astype(np.float32),
            "fpn.lateral3.bias": rng.standard_normal(32).astype(np.float32),
            "scalar": np.float32(3.25).reshape(()),
        }
        # exercise tricky payloads: negative zero and subnormals
        tensors["backbone.c1.0.weight"][0, 0, 0, 0] = np.float32(-0.0)
        tensors["backbone.c1.0.weight"][0, 0, 0, 1] = np.float32(1e-42)
        path = tmp_path / "w.yedg"
        save_weights(path, tensors)
        loaded = load_weights(path)
        assert list(loaded) == list(tensors)
        for name in tensors:
            assert loaded[name].dtype == np.float32
            assert loaded[name].shape == tensors[name].shape
            np.testing.assert_array_equal(
                loaded[name].view(np.uint32), tensors[name].view(np.uint32))

    def test_magic(self):
        blob = dump_weights({"a": np.ones(2, np.float32)})
        assert blob[:8] == b"YEDGWTS1"
        with pytest.raises(FormatError, match="magic"):
            parse_weights(b"NOTMAGIC" + blob[8:])

    def test_deterministic_bytes(self):
        tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
        assert dump_weights(tensors) == dump_weights(tensors)

    def test_order_preserved(self):
        t = {"b": np.ones(1, np.float32), "a": np.zeros(1, np.float32)}
        assert list(parse_weights(dump_weights(t))) == ["b", "a"]


class TestTensorFile:
    def test_roundtrip(self, tmp_path):
        x = np.random.default_rng(1).standard_normal((3, 4, 5)).astype(np.float32)
        save_tensor(tmp_path / "t.ten", x)
        y = load_tensor(tmp_path / "t.ten")
        np.testing.assert_array_equal(x.view(np.uint32), y.view(np.uint32))

    def test_magic(self):
        assert dump_tensor(np.zeros(1, np.float32))[:8] == b"YEDGTEN1"


class TestRle:
    def test_roundtrip_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            m = rng.random((8, 8)) > 0.5
            counts = rle_encode(m)
            np.testing.assert_array_equal(rle_decode(counts, (8, 8)), m)

    def test_starts_with_zero_run(self):
        m = np.array([[True, True], [False, False]])
        assert rle_encode(m) == [0, 2, 2]

    def test_bad_length_rejected(self):
        with pytest.raises(FormatError):
            rle_decode([3], (2, 2))
