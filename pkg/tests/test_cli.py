"""CLI tests: subcommand wiring, output artifacts, determinism."""
from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from warpseg.cli import main


def _digest_tree(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestCostModelCommand:
    def test_resnet101_prints_published_shape(self, capsys, tmp_path):
        assert main(["--out", str(tmp_path), "cost-model", "--arch", "resnet101",
                     "--input", "550"]) == 0
        out = capsys.readouterr().out
        assert "C4" in out
        row = next(line for line in out.splitlines() if line.startswith("C4"))
        assert row.split()[1] == "69"  # conv count
        assert abs(float(row.split()[-1]) - 66.2) <= 2.0

    def test_toy_arch(self, capsys, tmp_path):
        assert main(["--out", str(tmp_path), "cost-model", "--arch", "toy",
                     "--input", "64"]) == 0
        assert "fpn" in capsys.readouterr().out


class TestGenData:
    def test_writes_dataset_and_is_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["--seed", "3", "--out", str(a), "gen-data", "--videos", "2", "--ppm"])
        main(["--seed", "3", "--out", str(b), "gen-data", "--videos", "2", "--ppm"])
        assert (a / "dataset" / "index.txt").exists()
        assert list((a / "ppm").glob("*.ppm"))
        assert _digest_tree(a) == _digest_tree(b)

    def test_different_seed_changes_data(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["--seed", "3", "--out", str(a), "gen-data", "--videos", "2"])
        main(["--seed", "4", "--out", str(b), "gen-data", "--videos", "2"])
        assert _digest_tree(a) != _digest_tree(b)


class TestConfigFile:
    def test_scene_overrides(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("scene.frames = 3\nscene.max_speed = 0\n# comment\n")
        out = tmp_path / "out"
        main(["--config", str(cfg), "--out", str(out), "gen-data", "--videos", "1"])
        index = (out / "dataset" / "index.txt").read_text()
        assert index.split()[1] == "3"


class TestSmallPipelines:
    def test_train_flow_and_run_video(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["--seed", "1", "--out", str(out), "train-flow",
                     "--pairs", "2", "--steps", "3"]) == 0
        assert (out / "flow.yedg").exists()
        trace = (out / "train_flow_trace.csv").read_text().splitlines()
        assert trace[0] == "step,epe"
        assert len(trace) == 4
        assert main(["--seed", "1", "--out", str(out), "run-video", "--model",
                     str(out / "model.yedg"), "--interval", "5", "--ppm"]) == 0
        assert (out / "detections.txt").exists()
        assert list(out.glob("overlay_*.ppm"))

    def test_eval_and_benchmark(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["--seed", "2", "--out", str(out), "eval", "--videos", "1"]) == 0
        assert "mask AP" in capsys.readouterr().out
        assert main(["--seed", "2", "--out", str(out), "benchmark", "--videos", "1",
                     "--intervals", "1,5"]) == 0
        rows = [json.loads(line) for line in
                (out / "benchmark.jsonl").read_text().splitlines()]
        assert {r["interval"] for r in rows} == {1, 5}

    def test_calibrate_writes_scales(self, tmp_path):
        out = tmp_path / "o"
        assert main(["--seed", "5", "--out", str(out), "calibrate",
                     "--images", "4"]) == 0
        from warpseg.yedg import load_weights
        scales = load_weights(out / "calib.yedg")
        assert all(k.startswith("calib.") for k in scales)
        assert any("backbone/" in k for k in scales)

    def test_search_precision_tiny_grid(self, tmp_path, capsys):
        out = tmp_path / "o"
        main(["--seed", "5", "--out", str(out), "calibrate", "--images", "2"])
        assert main(["--seed", "5", "--out", str(out), "search-precision",
                     "--calib", str(out / "calib.yedg"), "--videos", "1",
                     "--backbone", "FP16,INT8", "--fpn", "FP16",
                     "--protonet", "FP16", "--predhead", "FP16",
                     "--flownet", "FP16"]) == 0
        rows = [json.loads(line) for line in
                (out / "search_precision.jsonl").read_text().splitlines()]
        assert len(rows) == 2
        assert any(r["pareto"] for r in rows)
