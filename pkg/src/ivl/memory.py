"""Spatial memory maps: the only state carried between inductive steps.

A memory is a single-channel map at input-image resolution tracking regions
already processed. Ground-truth memories are rendered from labels (line-box
masks for block parsing, gaussian peaks for counting); updates are additive
with the result clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class BlockLabel:
    """Ordered lines (top to bottom); each line is a pixel box plus token ids.

    Boxes are (row0, col0, row1, col1), half-open on the high edges.
    """
    lines: list  # list of (box, tokens)

    def num_lines(self):
        return len(self.lines)

    def box(self, k):
        return self.lines[k][0]

    def tokens(self, k):
        return list(self.lines[k][1])


@dataclass
class CountLabel:
    centres: list  # (row, col) pixel coordinates

    def count(self):
        return len(self.centres)


@dataclass
class SpatialMemory:
    map: np.ndarray  # (N, 1, H, W), float32 in [0, 1]
    step: int = 0

    @classmethod
    def zeros(cls, n, h, w, dtype=np.float32):
        return cls(map=np.zeros((n, 1, h, w), dtype=dtype), step=0)


def update_memory(m: SpatialMemory, delta: np.ndarray) -> SpatialMemory:
    """Additive update: new map = clamp(m + delta, 0, 1), step incremented."""
    delta = np.asarray(delta)
    if delta.shape != m.map.shape:
        raise ShapeError(f"memory update shape {delta.shape} != memory shape {m.map.shape}")
    return SpatialMemory(map=np.clip(m.map + delta, 0.0, 1.0), step=m.step + 1)


def render_line_mask(label: BlockLabel, k, size, n=1, dtype=np.float32) -> np.ndarray:
    """Binary (N,1,H,W) map: 1 inside line k's box, 0 elsewhere."""
    if not 0 <= k < label.num_lines():
        raise IndexError(f"line index {k} out of range for {label.num_lines()}-line label")
    h, w = size
    out = np.zeros((n, 1, h, w), dtype=dtype)
    r0, c0, r1, c1 = label.box(k)
    out[:, :, r0:r1, c0:c1] = 1.0
    return out


def block_memory(label: BlockLabel, k, size, dtype=np.float32) -> np.ndarray:
    """Ground-truth memory before step k: union of masks of lines < k."""
    h, w = size
    out = np.zeros((1, 1, h, w), dtype=dtype)
    for i in range(k):
        out = np.maximum(out, render_line_mask(label, i, size, dtype=dtype))
    return out


def render_peaks(centres, size, sigma, dtype=np.float32) -> np.ndarray:
    """(1,1,H,W) map with a unit gaussian peak at each centre (pixelwise max).

    Peaks combine by max so overlapping objects keep peak value 1 and the map
    stays a bounded regression target.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = size
    out = np.zeros((1, 1, h, w), dtype=dtype)
    if not len(centres):
        return out
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for (r0, c0) in centres:
        peak = np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2.0 * sigma * sigma))
        out[0, 0] = np.maximum(out[0, 0], peak.astype(dtype))
    return out


def concat_image_memory(x: np.ndarray, m: SpatialMemory) -> np.ndarray:
    """Channel concatenation [x || memory]: (N,C,H,W) -> (N,C+1,H,W)."""
    x = np.asarray(x)
    if x.shape[0] != m.map.shape[0] or x.shape[2:] != m.map.shape[2:]:
        raise ShapeError(f"image {x.shape} and memory {m.map.shape} extents differ")
    return np.concatenate([x, m.map.astype(x.dtype, copy=False)], axis=1)


def write_pgm_map(path, map2d):
    """Dump a [0,1] map as an 8-bit binary PGM (values x255, rounded)."""
    from .data import write_pgm  # local import to avoid a cycle at import time
    arr = np.clip(np.asarray(map2d, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.rint(arr * 255.0).astype(np.uint8))
