"""Command-line interface.

Subcommands: gen-data, train-seg, train-flow, calibrate, search-precision,
run-video, benchmark, cost-model, eval. Global flags: --config (flat
key=value file), --seed, --out. All randomness derives from the single seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec
from .costmodel import resnet101_cost_model, toy_cost_model
from .flownet import FlowNetConfig
from .metrics import format_pred_record
from .model import SegModel, build_model, load_model
from .pipeline import (BenchmarkRow, KeyframeSchedule, benchmark, evaluate_videos,
                       records_from_results, run_video)
from .quantize import (COMPONENTS, MODES, PrecisionConfig, apply_precision,
                       calibrate_scales, fallback_scales, search_precision)
from .report import Column, cost_table, render_overlay, render_table
from .synthdata import SceneSpec, VideoSample, gen_flow_pairs, gen_video, write_dataset
from .training import samples_from_videos, train_flow, train_seg
from .util import derive_seed, parse_config
from .yedg import load_weights, save_weights


def _scene_spec(cfg: dict[str, str]) -> SceneSpec:
    spec = SceneSpec()
    fields = {f: type(getattr(spec, f)) for f in
              ("canvas", "frames", "min_instances", "max_instances", "min_speed",
               "max_speed", "size_min", "size_max", "noise_sigma")}
    kwargs = {}
    for name, typ in fields.items():
        key = f"scene.{name}"
        if key in cfg:
            kwargs[name] = typ(cfg[key])
    return replace(spec, **kwargs) if kwargs else spec


def _gen_videos(seed: int, n: int, spec: SceneSpec) -> list[VideoSample]:
    return [gen_video(derive_seed(seed, "video", i), spec) for i in range(n)]


def _load_model_arg(args, seed: int) -> SegModel:
    model = build_model(seed)
    if getattr(args, "model", None):
        model.load_parameters(load_weights(args.model))
    return model


def _write_records(path: Path, records: list[dict]) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _scales_path_load(path) -> dict[str, float]:
    raw = load_weights(path)
    return {name[len("calib."):]: float(np.asarray(v).reshape(-1)[0])
            for name, v in raw.items()}


def _scales_path_save(path, scales: dict[str, float]) -> None:
    save_weights(path, {f"calib.{k}": np.array([v], dtype=np.float32)
                        for k, v in scales.items()})


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: Path, seed: int) -> int:
    spec = _scene_spec(cfg)
    videos = _gen_videos(seed, args.videos, spec)
    write_dataset(out / "dataset", videos)
    if args.ppm:
        ppm_dir = out / "ppm"
        ppm_dir.mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(videos):
            for t in (0, v.n_frames - 1):
                data = render_overlay(v.frames[t], list(v.masks[t]),
                                      [b for b in v.boxes[t]])
                (ppm_dir / f"seq{i:04d}_frame{t:03d}.ppm").write_bytes(data)
    print(f"wrote {len(videos)} sequences to {out / 'dataset'}")
    return 0


def cmd_train_seg(args, cfg, out: Path, seed: int) -> int:
    spec = _scene_spec(cfg)
    videos = _gen_videos(derive_seed(seed, "train-data"), args.videos, spec)
    samples = samples_from_videos(videos)
    model = build_model(derive_seed(seed, "init"))
    trace = train_seg(model, samples, steps=args.steps, base_lr=args.lr,
                      batch_size=args.batch, seed=seed, log_every=args.log_every)
    model.save(out / "model.yedg")
    with (out / "train_seg_trace.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)
    print(f"trained {args.steps} steps; final loss {trace[-1]['loss']:.4f}; "
          f"saved {out / 'model.yedg'}")
    return 0


def cmd_train_flow(args, cfg, out: Path, seed: int) -> int:
    model = _load_model_arg(args, derive_seed(seed, "init"))
    spec = _scene_spec(cfg)
    pairs = gen_flow_pairs(derive_seed(seed, "flow-data"), args.pairs,
                           model.backbone, spec)
    trace = train_flow(model, pairs, steps=args.steps, base_lr=args.lr, seed=seed)
    if args.refine_steps:
        from .training import train_warp_finetune
        ft_videos = _gen_videos(derive_seed(seed, "warp-ft"), 24,
                                replace(spec, min_speed=max(1, spec.min_speed)))
        train_warp_finetune(model, ft_videos, steps=args.refine_steps, seed=seed)
    save_weights(out / "flow.yedg", model.flownet.params)
    model.save(out / "model.yedg")
    with (out / "train_flow_trace.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epe"])
        writer.writerows(trace)
    print(f"trained flow {args.steps} steps; final epe {trace[-1][1]:.4f} cells; "
          f"saved {out / 'flow.yedg'}")
    return 0


def cmd_calibrate(args, cfg, out: Path, seed: int) -> int:
    model = _load_model_arg(args, derive_seed(seed, "init"))
    spec = _scene_spec(cfg)
    videos = _gen_videos(derive_seed(seed, "calib-data"),
                         max(1, args.images // spec.frames + 1), spec)
    frames = [f for v in videos for f in v.frames][:args.images]
    scales = calibrate_scales(model, frames)
    _scales_path_save(out / "calib.yedg", scales)
    print(f"calibrated {len(scales)} tensors from {len(frames)} images; "
          f"saved {out / 'calib.yedg'}")
    return 0


def cmd_search_precision(args, cfg, out: Path, seed: int) -> int:
    model = _load_model_arg(args, derive_seed(seed, "init"))
    scales = _scales_path_load(args.calib) if args.calib else fallback_scales(model)
    spec = _scene_spec(cfg)
    videos = _gen_videos(derive_seed(seed, "eval-data"), args.videos, spec)
    grid = {}
    for comp in COMPONENTS:
        modes = getattr(args, comp.replace("-", "_")).split(",")
        for m in modes:
            if m not in MODES:
                raise SystemExit(f"unknown mode {m!r} for {comp}")
        grid[comp] = tuple(modes)

    flops = model.component_flops((spec.canvas, spec.canvas))

    def evaluator(config: PrecisionConfig):
        quantized = apply_precision(model, config, scales)
        ap, _ = evaluate_videos(quantized, videos, KeyframeSchedule(args.interval))
        return ap.mask_ap, ap.box_ap

    rows = search_precision(grid, evaluator, flops)
    records = [{"config": r.config.name, "mask_ap": round(r.mask_ap, 6),
                "box_ap": round(r.box_ap, 6), "cost": r.cost, "pareto": r.pareto}
               for r in rows]
    _write_records(out / "search_precision.jsonl", records)
    table = render_table(
        [{**{c: dict(r.config.modes)[c] for c in COMPONENTS},
          "mask_ap": r.mask_ap, "box_ap": r.box_ap, "cost": r.cost,
          "pareto": "*" if r.pareto else ""} for r in rows],
        [Column(c, c) for c in COMPONENTS]
        + [Column("mask_ap", "mask AP", "ap"), Column("box_ap", "box AP", "ap"),
           Column("cost", "cost", "flops"), Column("pareto", "pareto")])
    (out / "search_precision.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_run_video(args, cfg, out: Path, seed: int) -> int:
    model = _load_model_arg(args, derive_seed(seed, "init"))
    spec = _scene_spec(cfg)
    video = gen_video(derive_seed(seed, "video", args.index), spec)
    results = run_video(model, video.frames, KeyframeSchedule(args.interval),
                        use_flow=not args.no_flow)
    lines = []
    from .metrics import PredRecord
    for fr in results:
        for det, mask in zip(fr.detections, fr.masks):
            lines.append(format_pred_record(PredRecord(
                frame_id=fr.frame_index, class_id=det.class_id, score=det.score,
                box=det.box, mask=mask)))
    (out / "detections.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    if args.ppm:
        for fr in results:
            data = render_overlay(video.frames[fr.frame_index], fr.masks,
                                  [d.box for d in fr.detections])
            (out / f"overlay_{fr.frame_index:03d}.ppm").write_bytes(data)
    total = sum(fr.total_flops for fr in results)
    print(f"processed {len(results)} frames "
          f"({sum(fr.is_keyframe for fr in results)} keyframes), "
          f"{len(lines)} detections, {total / len(results):.3g} FLOPs/frame")
    return 0


def cmd_benchmark(args, cfg, out: Path, seed: int) -> int:
    model = _load_model_arg(args, derive_seed(seed, "init"))
    spec = _scene_spec(cfg)
    videos = _gen_videos(derive_seed(seed, "bench-data"), args.videos, spec)
    schedules = [KeyframeSchedule(int(v)) for v in args.intervals.split(",")]
    cases: list[tuple[str, PrecisionConfig | None, dict | None]] = [("FP32", None, None)]
    if args.calib:
        scales = _scales_path_load(args.calib)
        cases.append(("FP16", PrecisionConfig.uniform("FP16"), None))
        cases.append(("INT8", PrecisionConfig.uniform("INT8"), scales))
    flow_cases = (True, False) if args.ablate_flow else (True,)
    rows = benchmark(model, videos, schedules, cases, flow_cases)
    _write_records(out / "benchmark.jsonl", [r.to_record() for r in rows])
    table = render_table(
        [r.to_record() for r in rows],
        [Column("interval", "interval", "int"), Column("config", "config"),
         Column("use_flow", "flow"), Column("mask_ap", "mask AP", "ap"),
         Column("box_ap", "box AP", "ap"),
         Column("mean_flops_per_frame", "FLOPs/frame", "flops"),
         Column("backbone_flops_per_frame", "backbone FLOPs", "flops")])
    (out / "benchmark.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_cost_model(args, cfg, out: Path, seed: int) -> int:
    if args.arch == "resnet101":
        report = resnet101_cost_model(args.input, args.input)
        print(cost_table(report))
    elif args.arch == "toy":
        report = toy_cost_model(BackboneSpec(), args.input, args.input)
        print(cost_table(report, flop_unit=1e6, unit_name="MFLOPs"))
    else:
        raise SystemExit(f"unknown arch {args.arch!r}")
    return 0


def cmd_eval(args, cfg, out: Path, seed: int) -> int:
    model = _load_model_arg(args, derive_seed(seed, "init"))
    spec = _scene_spec(cfg)
    videos = _gen_videos(derive_seed(seed, "eval-data"), args.videos, spec)
    ap, results = evaluate_videos(model, videos, KeyframeSchedule(args.interval))
    preds, _ = records_from_results(videos, results)
    (out / "predictions.txt").write_text(
        "\n".join(format_pred_record(p) for p in preds) + ("\n" if preds else ""))
    print(f"mask AP {100 * ap.mask_ap:.1f}  box AP {100 * ap.box_ap:.1f}  "
          f"({len(videos)} videos, interval {args.interval})")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpseg")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic video dataset")
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--ppm", action="store_true", help="also dump PPM previews")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-seg", help="train backbone+FPN+heads")
    p.add_argument("--videos", type=int, default=48)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-flow", help="train the flow estimator")
    p.add_argument("--model", help="YEDG weights to start from")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--refine-steps", type=int, default=0,
                   help="extra box-branch refinement steps on warped pyramids")
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("calibrate", help="entropy-calibrate INT8 activation scales")
    p.add_argument("--model")
    p.add_argument("--images", type=int, default=100)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("search-precision", help="mixed-precision grid search")
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--interval", type=int, default=5)
    for comp in COMPONENTS:
        p.add_argument(f"--{comp}", default="FP16,INT8",
                       help=f"comma-separated modes for {comp}")
    p.set_defaults(func=cmd_search_precision)

    p = sub.add_parser("run-video", help="run the keyframe pipeline on one video")
    p.add_argument("--model")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--interval", type=int, default=5)
    p.add_argument("--no-flow", action="store_true")
    p.add_argument("--ppm", action="store_true")
    p.set_defaults(func=cmd_run_video)

    p = sub.add_parser("benchmark", help="AP/FLOPs over schedules and precisions")
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--intervals", default="1,5")
    p.add_argument("--ablate-flow", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("cost-model", help="print the stage cost breakdown")
    p.add_argument("--arch", default="resnet101", choices=("resnet101", "toy"))
    p.add_argument("--input", type=int, default=550)
    p.set_defaults(func=cmd_cost_model)

    p = sub.add_parser("eval", help="evaluate AP on synthetic videos")
    p.add_argument("--model")
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--interval", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = parse_config(args.config) if args.config else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return args.func(args, cfg, out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
