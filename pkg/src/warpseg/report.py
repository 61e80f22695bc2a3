"""Aligned text tables and plain-PPM overlay rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Array

PALETTE = (
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0),
    (255, 0, 255), (0, 255, 255), (255, 128, 0), (128, 0, 255),
)


@dataclass(frozen=True)
class Column:
    key: str
    header: str
    kind: str = "str"  # str | int | ap | flops | pct | float


def _format_cell(value, kind: str) -> str:
    if value is None:
        return "--"
    if kind == "int":
        return str(int(value))
    if kind == "ap":
        return f"{100.0 * float(value):.1f}"  # AP fractions print as points
    if kind == "pct":
        return f"{float(value):.1f}"
    if kind == "flops":
        return f"{float(value):.3g}"
    if kind == "float":
        return f"{float(value):.4f}"
    return str(value)


def render_table(records: list[dict], columns: list[Column]) -> str:
    """Deterministic fixed-width table; numeric columns right-aligned."""
    cells = [[_format_cell(r.get(c.key), c.kind) for c in columns] for r in records]
    widths = [max(len(c.header), *(len(row[i]) for row in cells)) if cells else len(c.header)
              for i, c in enumerate(columns)]
    right = [c.kind != "str" for c in columns]

    def fmt_row(row: list[str]) -> str:
        return "  ".join(v.rjust(w) if r else v.ljust(w)
                         for v, w, r in zip(row, widths, right)).rstrip()

    lines = [fmt_row([c.header for c in columns]),
             "  ".join("-" * w for w in widths)]
    lines.extend(fmt_row(row) for row in cells)
    return "\n".join(lines) + "\n"


def cost_table(report, flop_unit: float = 1e12, unit_name: str = "TFLOPs") -> str:
    records = [
        {"stage": stage, "convs": report.conv_count.get(stage),
         "flops": report.flops[stage] / flop_unit, "pct": report.percentages[stage]}
        for stage in report.flops
    ]
    columns = [Column("stage", "stage"), Column("convs", "# convs", "int"),
               Column("flops", unit_name, "flops"), Column("pct", "%", "pct")]
    return render_table(records, columns)


# --------------------------------------------------------------------------
# PPM rendering
# --------------------------------------------------------------------------

def frame_to_u8(frame: Array) -> np.ndarray:
    """[3,H,W] float in [0,1] -> [H,W,3] uint8."""
    x = np.clip(frame, 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8).transpose(1, 2, 0)


def ppm_bytes(image_u8: np.ndarray) -> bytes:
    """Plain-text (P3) PPM encoding of an [H,W,3] uint8 image."""
    h, w, _ = image_u8.shape
    lines = [f"P3", f"{w} {h}", "255"]
    flat = image_u8.reshape(h, w * 3)
    for row in flat:
        lines.append(" ".join(str(int(v)) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def render_overlay(frame: Array, masks: list[np.ndarray],
                   boxes: list[np.ndarray] | None = None) -> bytes:
    """Blend instance masks at alpha 0.5 over the frame and outline boxes.

    Blending rounds half up: out = (pixel + color + 1) // 2. With no
    detections the output is exactly the input frame.
    """
    img = frame_to_u8(frame).astype(np.int32)
    h, w, _ = img.shape
    for idx, mask in enumerate(masks):
        color = np.array(PALETTE[idx % len(PALETTE)], dtype=np.int32)
        if mask.shape != (h, w):
            fy, fx = h // mask.shape[0], w // mask.shape[1]
            mask = np.repeat(np.repeat(mask, fy, axis=0), fx, axis=1)
        img[mask] = (img[mask] + color[None, :] + 1) // 2
    if boxes:
        for idx, box in enumerate(boxes):
            color = np.array(PALETTE[idx % len(PALETTE)], dtype=np.int32)
            x0 = int(round((box[0] - box[2] / 2) * w))
            x1 = int(round((box[0] + box[2] / 2) * w)) - 1
            y0 = int(round((box[1] - box[3] / 2) * h))
            y1 = int(round((box[1] + box[3] / 2) * h)) - 1
            x0, x1 = max(x0, 0), min(x1, w - 1)
            y0, y1 = max(y0, 0), min(y1, h - 1)
            img[y0, x0:x1 + 1] = color
            img[y1, x0:x1 + 1] = color
            img[y0:y1 + 1, x0] = color
            img[y0:y1 + 1, x1] = color
    return ppm_bytes(img.astype(np.uint8))
