"""Binary persistence: YEDG weight bundles and single raw tensor files.

Weight bundle layout (all integers little-endian uint32):
    8-byte magic "YEDGWTS1" | tensor count |
    per tensor: name length, UTF-8 name, rank, dims..., raw FP32 payload.

Tensor file layout: 8-byte magic "YEDGTEN1" | rank | dims... | FP32 payload.
Round trips are bit-exact; serialization order follows mapping insertion order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .graph import Array

WEIGHTS_MAGIC = b"YEDGWTS1"
TENSOR_MAGIC = b"YEDGTEN1"


class FormatError(ValueError):
    pass


def _pack_tensor(name: str, x: Array) -> bytes:
    data = np.asarray(x, dtype="<f4", order="C")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", data.ndim)
    dims = struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    return head + dims + data.tobytes()


def dump_weights(tensors: dict[str, Array]) -> bytes:
    body = b"".join(_pack_tensor(name, x) for name, x in tensors.items())
    return WEIGHTS_MAGIC + struct.pack("<I", len(tensors)) + body


def save_weights(path, tensors: dict[str, Array]) -> None:
    Path(path).write_bytes(dump_weights(tensors))


def load_weights(path) -> dict[str, Array]:
    return parse_weights(Path(path).read_bytes())


def parse_weights(blob: bytes) -> dict[str, Array]:
    if blob[:8] != WEIGHTS_MAGIC:
        raise FormatError("not a YEDG weight bundle (bad magic)")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: dict[str, Array] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        out[name] = payload.reshape(dims).astype(np.float32)
    if offset != len(blob):
        raise FormatError("trailing bytes after declared tensors")
    return out


def dump_tensor(x: Array) -> bytes:
    data = np.asarray(x, dtype="<f4", order="C")
    dims = struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    return TENSOR_MAGIC + struct.pack("<I", data.ndim) + dims + data.tobytes()


def save_tensor(path, x: Array) -> None:
    Path(path).write_bytes(dump_tensor(x))


def load_tensor(path) -> Array:
    blob = Path(path).read_bytes()
    if blob[:8] != TENSOR_MAGIC:
        raise FormatError("not a YEDG tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 12) if rank else ()
    n = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f4", count=n, offset=12 + 4 * rank)
    return payload.reshape(dims).astype(np.float32)


# Run-length encoding for binary masks: row-major counts of alternating runs,
# starting with the zero run (possibly 0).

def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask).reshape(-1).astype(bool)
    if flat.size == 0:
        return [0]
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_decode(counts: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = shape[0] * shape[1]
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if c:
            flat[pos:pos + c] = value
        pos += c
        value = not value
    if pos != total:
        raise FormatError(f"RLE covers {pos} pixels, mask has {total}")
    return flat.reshape(shape)
