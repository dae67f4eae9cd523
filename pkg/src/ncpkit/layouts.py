"""Tensor-memory layouts.

pixel-major: all pixels of channel 0 in row-major order, then channel 1,
and so on -- a flat (c, h, w) array.

interleaved: the tensor is split into ceil(c / t_tm) channel tiles placed
sequentially; within a tile the t_tm channels of each pixel are
contiguous, i.e. tile order is (h, w, c_tile).  A 32-byte memory word
then holds 32 consecutive channels of one pixel, which is what the
depthwise pipelines consume.  When c is not a multiple of t_tm the last
tile is simply narrower, so both layouts occupy exactly h*w*c bytes.
"""

from __future__ import annotations

import numpy as np

from .isa import LAYOUT_INTERLEAVED, LAYOUT_PIXEL_MAJOR

T_TM = 32


def encode(arr: np.ndarray, layout: int, t_tm: int = T_TM) -> np.ndarray:
    """Flatten a (c, h, w) int8 array into layout order."""
    c, h, w = arr.shape
    if layout == LAYOUT_PIXEL_MAJOR:
        return np.ascontiguousarray(arr).reshape(-1)
    if layout != LAYOUT_INTERLEAVED:
        raise ValueError(f"unknown layout {layout}")
    parts = []
    for t0 in range(0, c, t_tm):
        tile = arr[t0:t0 + t_tm]  # (tc, h, w)
        parts.append(np.ascontiguousarray(tile.transpose(1, 2, 0)).reshape(-1))
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def decode(buf: np.ndarray, shape: tuple[int, int, int], layout: int,
           t_tm: int = T_TM) -> np.ndarray:
    """Inverse of encode; buf is a flat int8 array of h*w*c bytes."""
    c, h, w = shape
    if buf.size != c * h * w:
        raise ValueError(f"buffer holds {buf.size} bytes, expected {c * h * w}")
    if layout == LAYOUT_PIXEL_MAJOR:
        return buf.reshape(c, h, w).copy()
    if layout != LAYOUT_INTERLEAVED:
        raise ValueError(f"unknown layout {layout}")
    out = np.empty((c, h, w), dtype=buf.dtype)
    pos = 0
    for t0 in range(0, c, t_tm):
        tc = min(t_tm, c - t0)
        n = tc * h * w
        tile = buf[pos:pos + n].reshape(h, w, tc)
        out[t0:t0 + tc] = tile.transpose(2, 0, 1)
        pos += n
    return out
