"""Seed derivation and flat key=value config files."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 step; the basis for deriving independent child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit child seed for (master, labels...); labels may be str/int."""
    h = hashlib.sha256()
    for label in labels:
        h.update(str(label).encode("utf-8"))
        h.update(b"\x1f")
    x = (master ^ int.from_bytes(h.digest()[:8], "little")) & MASK64
    return splitmix64(x)


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))


def he_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """He-normal initialization for conv kernels shaped (Cout, Cin, k, k)."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def parse_config(path) -> dict[str, str]:
    """Flat key=value text: one pair per line, '#' comments, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
