"""Deterministic synthetic videos: flat-colored moving shapes with exact labels.

Instances translate rigidly with constant integer per-frame velocities, never
leave the canvas, and never overlap each other, so masks, boxes, and optical
flow are exact by construction. A static per-sequence noise field supplies
texture without breaking frame-to-frame equality for zero-velocity scenes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .flownet import FlowField
from .graph import Array, GraphError, LayerGraph
from .util import derive_seed, rng_for
from .yedg import load_tensor, rle_decode, rle_encode, save_tensor

SHAPE_CLASSES = {"disk": 1, "square": 2, "triangle": 3}
CLASS_NAMES = {v: k for k, v in SHAPE_CLASSES.items()}
NUM_CLASSES = 3


class GenerationError(ValueError):
    pass


# Class-correlated color families keep the 3-way classification learnable at
# toy scale: at stride-8 features a 12px disk and square differ by only a few
# corner pixels, so hue carries the class and geometry carries the mask.
CLASS_COLOR_BASE = {
    "disk": (0.85, 0.35, 0.35),
    "square": (0.35, 0.85, 0.35),
    "triangle": (0.40, 0.45, 0.90),
}
COLOR_JITTER = 0.10


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    frames: int = 10
    min_instances: int = 1
    max_instances: int = 3
    min_speed: int = 0
    max_speed: int = 3
    size_min: int = 6
    size_max: int = 10
    margin: int = 4
    noise_sigma: float = 0.02
    shared_velocity: bool = False
    keyframe_blur: float = 0.0  # optional motion-blur stand-in, off by default

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class InstanceSpec:
    kind: str
    class_id: int
    size: int
    color: tuple[float, float, float]
    start: tuple[int, int]  # (cx, cy) at frame 0
    velocity: tuple[int, int]  # (vx, vy) px/frame

    def center(self, t: int) -> tuple[int, int]:
        return (self.start[0] + t * self.velocity[0],
                self.start[1] + t * self.velocity[1])


@dataclass
class VideoSample:
    spec: SceneSpec
    seed: int
    instances: list[InstanceSpec]
    frames: list[Array]              # T x [3,H,W]
    masks: list[list[np.ndarray]]    # per frame, per instance bool [H,W]
    classes: np.ndarray              # instance class ids (constant over time)
    boxes: list[np.ndarray]          # per frame [n,4] normalized (cx,cy,w,h)
    flows: list[FlowField]           # T-1 fields at stride 1, anchored at frame t

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def occupancy(self, t: int) -> np.ndarray:
        occ = np.zeros((self.spec.canvas, self.spec.canvas), dtype=bool)
        for m in self.masks[t]:
            occ |= m
        return occ


def _shape_mask(kind: str, cx: int, cy: int, size: int, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size ** 2
    if kind == "square":
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= size
    if kind == "triangle":
        return ((yy >= cy - size) & (yy <= cy + size)
                & (np.abs(xx - cx) <= (yy - cy + size) / 2.0))
    raise GenerationError(f"unknown shape kind {kind!r}")


def _mask_box(mask: np.ndarray, canvas: int) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return np.array([(x0 + x1) / 2 / canvas, (y0 + y1) / 2 / canvas,
                     (x1 - x0) / canvas, (y1 - y0) / canvas], dtype=np.float32)


def _sample_instances(rng: np.random.Generator, spec: SceneSpec) -> list[InstanceSpec]:
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    kinds = sorted(SHAPE_CLASSES)
    out: list[InstanceSpec] = []
    shared_v: tuple[int, int] | None = None

    def sample_velocity() -> tuple[int, int]:
        for _ in range(200):
            v = (int(rng.integers(-spec.max_speed, spec.max_speed + 1)),
                 int(rng.integers(-spec.max_speed, spec.max_speed + 1)))
            if max(abs(v[0]), abs(v[1])) >= spec.min_speed:
                return v
        raise GenerationError(f"cannot sample velocity with min_speed={spec.min_speed}")

    for _ in range(count):
        placed = False
        for _ in range(500):
            kind = kinds[int(rng.integers(0, len(kinds)))]
            size = int(rng.integers(spec.size_min, spec.size_max + 1))
            if spec.shared_velocity:
                if shared_v is None:
                    shared_v = sample_velocity()
                v = shared_v
            else:
                v = sample_velocity()
            span = spec.frames - 1
            lo_x = spec.margin + size + max(0, -v[0] * span)
            hi_x = spec.canvas - 1 - spec.margin - size - max(0, v[0] * span)
            lo_y = spec.margin + size + max(0, -v[1] * span)
            hi_y = spec.canvas - 1 - spec.margin - size - max(0, v[1] * span)
            if lo_x > hi_x or lo_y > hi_y:
                continue  # this velocity/size would force a canvas exit
            start = (int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1)))
            base = CLASS_COLOR_BASE[kind]
            jitter = rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
            color = tuple(float(np.clip(b + j, 0.05, 1.0)) for b, j in zip(base, jitter))
            cand = InstanceSpec(kind, SHAPE_CLASSES[kind], size, color, start, v)
            if all(_separated(cand, other, spec) for other in out):
                out.append(cand)
                placed = True
                break
        if not placed and len(out) < spec.min_instances:
            raise GenerationError("could not place enough non-overlapping instances; "
                                  "relax the scene spec")
        # a crowded scene silently keeps fewer instances (>= min_instances)
    return out


def _separated(a: InstanceSpec, b: InstanceSpec, spec: SceneSpec) -> bool:
    # Conservative L-inf separation of bounding boxes on every frame.
    gap = a.size + b.size + 2
    for t in range(spec.frames):
        ax, ay = a.center(t)
        bx, by = b.center(t)
        if max(abs(ax - bx), abs(ay - by)) <= gap:
            return False
    return True


def gen_video(seed: int, spec: SceneSpec) -> VideoSample:
    """Render a sequence with exact masks, boxes, classes, and pairwise flow."""
    rng = rng_for(seed, "scene")
    instances = _sample_instances(rng, spec)
    canvas = spec.canvas
    background = np.full((3, canvas, canvas), 0.1, dtype=np.float32)
    noise = rng.normal(0.0, spec.noise_sigma, size=(3, canvas, canvas)).astype(np.float32) \
        if spec.noise_sigma > 0 else None

    frames, masks, boxes, flows = [], [], [], []
    classes = np.array([inst.class_id for inst in instances], dtype=np.int64)
    for t in range(spec.frames):
        frame = background.copy()
        frame_masks = []
        frame_boxes = []
        for inst in instances:
            cx, cy = inst.center(t)
            m = _shape_mask(inst.kind, cx, cy, inst.size, canvas)
            frame[:, m] = np.array(inst.color, dtype=np.float32)[:, None]
            frame_masks.append(m)
            frame_boxes.append(_mask_box(m, canvas))
        if noise is not None:
            frame = np.clip(frame + noise, 0.0, 1.0)
        frames.append(frame.astype(np.float32))
        masks.append(frame_masks)
        boxes.append(np.stack(frame_boxes) if frame_boxes else np.zeros((0, 4), np.float32))

    for t in range(spec.frames - 1):
        flow = np.zeros((2, canvas, canvas), dtype=np.float32)
        for inst, m in zip(instances, masks[t]):
            flow[0][m] = inst.velocity[0]
            flow[1][m] = inst.velocity[1]
        flows.append(FlowField(values=flow, stride=1))

    return VideoSample(spec=spec, seed=seed, instances=instances, frames=frames,
                       masks=masks, classes=classes, boxes=boxes, flows=flows)


def keyward_flow(sample: VideoSample, key_index: int, cur_index: int) -> FlowField:
    """Exact stride-1 flow anchored at ``cur_index`` pointing back to the keyframe.

    This is the field the warping path consumes: sampling the keyframe at
    x + flow(x) reconstructs the current frame on instance pixels.
    """
    if not 0 <= key_index <= cur_index < sample.n_frames:
        raise GenerationError(f"bad frame pair ({key_index}, {cur_index})")
    canvas = sample.spec.canvas
    dt = cur_index - key_index
    flow = np.zeros((2, canvas, canvas), dtype=np.float32)
    for inst, m in zip(sample.instances, sample.masks[cur_index]):
        flow[0][m] = -inst.velocity[0] * dt
        flow[1][m] = -inst.velocity[1] * dt
    return FlowField(values=flow, stride=1)


def pool_flow_to_stride(flow: FlowField, target_stride: int) -> FlowField:
    """Average-pool a flow field to a coarser stride with magnitude rescale."""
    from .warp import scale_flow
    return scale_flow(flow, target_stride)


@dataclass
class FlowPair:
    c3_key: Array
    c3_cur: Array
    gt: FlowField  # stride 8, anchored at the current frame


def gen_flow_pairs(seed: int, n: int, backbone_graph: LayerGraph,
                   spec: SceneSpec | None = None, max_shift: int = 12) -> list[FlowPair]:
    """Training pairs: C3 features of two frames plus exact stride-8 flow.

    Frame pairs translate instances by up to ``max_shift`` px, covering the
    displacement range a keyframe-interval schedule produces.
    """
    from .backbone import backbone_forward
    base = spec or SceneSpec()
    pair_spec = replace(base, frames=2, max_speed=max_shift)
    pairs = []
    for i in range(n):
        sample = gen_video(derive_seed(seed, "flow-pair", i), pair_spec)
        c3_key = backbone_forward(backbone_graph, sample.frames[0], "C3")["C3"]
        c3_cur = backbone_forward(backbone_graph, sample.frames[1], "C3")["C3"]
        gt = pool_flow_to_stride(keyward_flow(sample, 0, 1), 8)
        pairs.append(FlowPair(c3_key=c3_key, c3_cur=c3_cur, gt=gt))
    return pairs


# --------------------------------------------------------------------------
# Dataset directory layout
# --------------------------------------------------------------------------

def write_dataset(root, samples: list[VideoSample]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index_lines = []
    for i, sample in enumerate(samples):
        seq_id = f"seq_{i:04d}"
        seq_dir = root / seq_id
        seq_dir.mkdir(exist_ok=True)
        for t, frame in enumerate(sample.frames):
            save_tensor(seq_dir / f"frame_{t:03d}.ten", frame)
        for t, flow in enumerate(sample.flows):
            save_tensor(seq_dir / f"flow_{t:03d}.ten", flow.values)
        for t in range(sample.n_frames):
            lines = []
            for cls, m in zip(sample.classes, sample.masks[t]):
                counts = " ".join(str(c) for c in rle_encode(m))
                lines.append(f"{int(cls)} {counts}")
            (seq_dir / f"masks_{t:03d}.txt").write_text("\n".join(lines) + "\n")
        index_lines.append(f"{seq_id} {sample.n_frames} {sample.spec.digest()}")
    (root / "index.txt").write_text("\n".join(index_lines) + "\n")


@dataclass
class LoadedSequence:
    seq_id: str
    frames: list[Array]
    masks: list[list[np.ndarray]]
    classes: np.ndarray
    boxes: list[np.ndarray]
    flows: list[FlowField]


def load_dataset(root) -> list[LoadedSequence]:
    root = Path(root)
    out = []
    for line in (root / "index.txt").read_text().splitlines():
        seq_id, length, _digest = line.split()
        seq_dir = root / seq_id
        frames = [load_tensor(seq_dir / f"frame_{t:03d}.ten") for t in range(int(length))]
        canvas = frames[0].shape[1]
        flows = [FlowField(values=load_tensor(seq_dir / f"flow_{t:03d}.ten"), stride=1)
                 for t in range(int(length) - 1)]
        masks, classes, boxes = [], None, []
        for t in range(int(length)):
            frame_masks, frame_classes, frame_boxes = [], [], []
            for entry in (seq_dir / f"masks_{t:03d}.txt").read_text().splitlines():
                parts = entry.split()
                frame_classes.append(int(parts[0]))
                m = rle_decode([int(c) for c in parts[1:]], (canvas, canvas))
                frame_masks.append(m)
                frame_boxes.append(_mask_box(m, canvas))
            masks.append(frame_masks)
            classes = np.array(frame_classes, dtype=np.int64)
            boxes.append(np.stack(frame_boxes) if frame_boxes else np.zeros((0, 4), np.float32))
        out.append(LoadedSequence(seq_id, frames, masks, classes, boxes, flows))
    return out
