"""Procedural image datasets shaped like the real benchmarks.

Used when the real files are not on disk (offline machines, CI). Each class is
a geometric pattern or texture drawn in a random foreground colour over a
random background, at a random position, scale and phase, plus pixel noise.
Class identity survives crops, flips and colour jitter, so self-supervised
training has something to learn.

Generation is deterministic: sample ``i`` of a split depends only on the
dataset name, the split and ``i``'s chunk.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import DatasetSplits, LabeledDataset

PATTERNS = ("disk", "square", "ring", "hstripes", "vstripes", "dstripes",
            "checker", "cross", "triangle", "dots")
CHUNK = 2000


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    size: int
    n_train: int
    n_test: int


SYNTHETIC_SPECS = {
    "synthetic-cifar10": SyntheticSpec(10, 32, 50000, 10000),
    "synthetic-cifar100": SyntheticSpec(100, 32, 50000, 10000),
    "synthetic-stl10": SyntheticSpec(10, 96, 2000, 2000),
    "synthetic-small": SyntheticSpec(10, 32, 2000, 1000),
}

# fixed foreground palette distinguishing the 10 colour groups of the 100-class variant
_PALETTE = np.array([
    [0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.9], [0.9, 0.9, 0.1], [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9], [1.0, 0.5, 0.0], [0.5, 0.0, 1.0], [0.6, 0.3, 0.1], [0.95, 0.95, 0.95],
])


def _masks(pattern: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    """Soft masks in [0, 1] of shape (n, size, size), one pattern id per row."""
    n = len(pattern)
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx = rng.uniform(-0.3, 0.3, n)[:, None, None]
    cy = rng.uniform(-0.3, 0.3, n)[:, None, None]
    scale = rng.uniform(0.55, 0.9, n)[:, None, None]
    angle = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    freq = rng.uniform(2.5, 4.5, n)[:, None, None] * np.pi
    phase = rng.uniform(0, 2 * np.pi, n)[:, None, None]
    x = xx[None] - cx
    y = yy[None] - cy
    xr = np.cos(angle) * x + np.sin(angle) * y
    yr = -np.sin(angle) * x + np.cos(angle) * y
    r = np.sqrt(x ** 2 + y ** 2)
    sharp = size / 2.0  # edge width about one pixel

    def soft(d):
        # d > 0 inside the shape
        return 1.0 / (1.0 + np.exp(-np.clip(d * sharp, -30, 30)))

    tilt = rng.uniform(-0.25, 0.25, n)[:, None, None]
    diag = np.where(rng.random(n) < 0.5, np.pi / 4, -np.pi / 4)[:, None, None] + tilt
    out = np.empty((n, size, size))
    for pid in range(len(PATTERNS)):
        sel = pattern == pid
        if not sel.any():
            continue
        s, X, Y, R, XR, YR = scale[sel], x[sel], y[sel], r[sel], xr[sel], yr[sel]
        f, ph, t = freq[sel], phase[sel], tilt[sel]
        name = PATTERNS[pid]
        if name == "disk":
            m = soft(0.6 * s - R)
        elif name == "square":
            m = soft(0.5 * s - np.maximum(np.abs(XR), np.abs(YR)))
        elif name == "ring":
            m = soft(0.13 * s - np.abs(R - 0.5 * s))
        elif name == "hstripes":
            m = soft(np.sin(f * (Y + t * X) + ph) / f * 2)
        elif name == "vstripes":
            m = soft(np.sin(f * (X + t * Y) + ph) / f * 2)
        elif name == "dstripes":
            d = diag[sel]
            m = soft(np.sin(f * (np.cos(d) * X + np.sin(d) * Y) + ph) / f * 2)
        elif name == "checker":
            m = soft(np.sin(f * XR + ph) * np.sin(f * YR + ph) / f * 4)
        elif name == "cross":
            arm = 0.16 * s
            length = 0.75 * s
            a = np.minimum(arm - np.abs(XR), length - np.abs(YR))
            b = np.minimum(arm - np.abs(YR), length - np.abs(XR))
            m = soft(np.maximum(a, b))
        elif name == "triangle":
            # upward triangle in the rotated frame
            k = 0.7 * s
            m = soft(np.minimum(YR + 0.5 * k, (k - YR) * 0.5 - np.abs(XR) * 0.9))
        else:  # dots
            m = soft((np.cos(f * XR + ph) * np.cos(f * YR + ph) - 0.6) / f * 4)
        out[sel] = m
    return out


def _render(labels: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    pattern = labels % len(PATTERNS)
    mask = _masks(pattern, rng, spec.size)[:, None]
    bg = rng.uniform(0, 1, (n, 3))
    fg = rng.uniform(0, 1, (n, 3))
    if spec.classes > len(PATTERNS):
        group = labels // len(PATTERNS)
        fg = np.clip(_PALETTE[group % len(_PALETTE)] + rng.normal(0, 0.05, (n, 3)), 0, 1)
        bg = bg * 0.5
    lum = lambda c: c @ np.array([0.299, 0.587, 0.114])
    weak = np.abs(lum(fg) - lum(bg)) < 0.3
    fg[weak] = 1.0 - bg[weak]
    img = bg[:, :, None, None] * (1 - mask) + fg[:, :, None, None] * mask
    img += rng.normal(0, 0.04, img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate(name: str, split: str, n: int) -> LabeledDataset:
    spec = SYNTHETIC_SPECS[name]
    key = zlib.crc32(f"{name}/{split}".encode())
    labels = np.arange(n, dtype=np.int64) % spec.classes
    labels = labels[np.random.default_rng(key).permutation(n)]
    images = np.empty((n, 3, spec.size, spec.size), dtype=np.uint8)
    for start in range(0, n, CHUNK):
        rng = np.random.default_rng(np.random.SeedSequence(key, spawn_key=(start // CHUNK,)))
        images[start:start + CHUNK] = _render(labels[start:start + CHUNK], spec, rng)
    return LabeledDataset(images, labels, spec.classes, split, name)


@lru_cache(maxsize=4)
def load_synthetic(name: str) -> DatasetSplits:
    from .errors import DatasetNotFound

    if name not in SYNTHETIC_SPECS:
        raise DatasetNotFound(f"unknown synthetic dataset {name!r}; known: {sorted(SYNTHETIC_SPECS)}")
    spec = SYNTHETIC_SPECS[name]
    return DatasetSplits(generate(name, "train", spec.n_train), generate(name, "test", spec.n_test))
