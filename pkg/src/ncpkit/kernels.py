"""Hot numeric kernels for the simulator: int8 convolutions.

Two interchangeable backends produce bit-identical results:

* "numba" -- explicit loops under @njit, mirroring the MAC-array and
  depthwise-pipeline dataflow.  Default when numba imports cleanly.
* "numpy" -- vectorized im2col + integer matmul fallback.

Select with the environment variable NCPKIT_KERNELS=numba|numpy before
import; ``backend()`` reports the active choice.  The fixed-point rules
shared with the reference interpreter live in docs/arithmetic.md: int32
accumulation, float32 batch-norm, ReLU before rounding, round-half-even,
saturation to [-128, 127].
"""

from __future__ import annotations

import os

import numpy as np

_ENV = os.environ.get("NCPKIT_KERNELS", "auto").lower()
if _ENV not in ("auto", "numba", "numpy"):
    raise ValueError(f"NCPKIT_KERNELS must be numba|numpy, not '{_ENV}'")

_BACKEND = "numpy"
if _ENV in ("auto", "numba"):
    try:
        from numba import njit

        _BACKEND = "numba"
    except ImportError:
        if _ENV == "numba":
            raise


def backend() -> str:
    return _BACKEND


def _out_hw(ih: int, iw: int, stride: int) -> tuple[int, int]:
    return -(-ih // stride), -(-iw // stride)


# -- numpy fallback ------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(ic*k*k, oh*ow) int32 patch matrix; zero padding when k == 3."""
    ic, ih, iw = x.shape
    pad = 1 if k == 3 else 0
    oh, ow = _out_hw(ih, iw, stride)
    xp = np.zeros((ic, ih + 2 * pad + stride, iw + 2 * pad + stride), dtype=np.int32)
    xp[:, pad:pad + ih, pad:pad + iw] = x
    cols = np.empty((ic * k * k, oh * ow), dtype=np.int32)
    row = 0
    for i in range(ic):
        for ky in range(k):
            for kx in range(k):
                win = xp[i,
                         ky:ky + (oh - 1) * stride + 1:stride,
                         kx:kx + (ow - 1) * stride + 1:stride]
                cols[row] = win.reshape(-1)
                row += 1
    return cols


def _post_numpy(acc: np.ndarray, scale, bias, bn_en: bool,
                relu_en: bool) -> np.ndarray:
    v = acc.astype(np.float32)
    if bn_en:
        v = v * scale.reshape(-1, *([1] * (v.ndim - 1)))
        v = v + bias.reshape(-1, *([1] * (v.ndim - 1)))
    if relu_en:
        v = np.maximum(v, np.float32(0.0))
    r = np.rint(v).astype(np.int64)
    return np.clip(r, -128, 127).astype(np.int8)


def _conv2d_numpy(x, w, stride, scale, bias, bn_en, relu_en):
    oc, ic, k, _ = w.shape
    oh, ow = _out_hw(x.shape[1], x.shape[2], stride)
    cols = _im2col(x, k, stride)
    acc = w.reshape(oc, -1).astype(np.int32) @ cols
    return _post_numpy(acc, scale, bias, bn_en, relu_en).reshape(oc, oh, ow)


def _dwconv2d_numpy(x, w, stride, scale, bias, bn_en, relu_en):
    c, ih, iw = x.shape
    oh, ow = _out_hw(ih, iw, stride)
    xp = np.zeros((c, ih + 2 + stride, iw + 2 + stride), dtype=np.int32)
    xp[:, 1:1 + ih, 1:1 + iw] = x
    acc = np.zeros((c, oh, ow), dtype=np.int32)
    for ky in range(3):
        for kx in range(3):
            win = xp[:,
                     ky:ky + (oh - 1) * stride + 1:stride,
                     kx:kx + (ow - 1) * stride + 1:stride]
            acc += win * w[:, ky, kx].astype(np.int32)[:, None, None]
    return _post_numpy(acc, scale, bias, bn_en, relu_en)


# -- numba backend -------------------------------------------------------------

if _BACKEND == "numba":

    @njit(cache=True)
    def _conv_acc_njit(xt, wt, stride, pad, acc):
        # xt is channel-last (ih, iw, ic), wt is (oc, k, k, ic): the inner
        # reduction then runs over contiguous memory
        ih, iw, ic = xt.shape
        oc, k, _, _ = wt.shape
        _, oh, ow = acc.shape
        for o in range(oc):
            for oy in range(oh):
                for ox in range(ow):
                    s = np.int32(0)
                    for ky in range(k):
                        y = oy * stride + ky - pad
                        if y < 0 or y >= ih:
                            continue
                        for kx in range(k):
                            xx = ox * stride + kx - pad
                            if xx < 0 or xx >= iw:
                                continue
                            for i in range(ic):
                                s += np.int32(xt[y, xx, i]) * np.int32(wt[o, ky, kx, i])
                    acc[o, oy, ox] = s

    @njit(cache=True)
    def _dwconv_acc_njit(x, w, stride, acc):
        c, ih, iw = x.shape
        _, oh, ow = acc.shape
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    s = np.int32(0)
                    for ky in range(3):
                        y = oy * stride + ky - 1
                        if y < 0 or y >= ih:
                            continue
                        for kx in range(3):
                            xx = ox * stride + kx - 1
                            if xx < 0 or xx >= iw:
                                continue
                            s += np.int32(x[ch, y, xx]) * np.int32(w[ch, ky, kx])
                    acc[ch, oy, ox] = s

    @njit(cache=True)
    def _post_njit(acc, scale, bias, bn_en, relu_en, out):
        c, oh, ow = acc.shape
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    v = np.float32(acc[ch, oy, ox])
                    if bn_en:
                        v = v * scale[ch] + bias[ch]
                    if relu_en and v < np.float32(0.0):
                        v = np.float32(0.0)
                    r = np.int32(np.rint(v))
                    if r > 127:
                        r = 127
                    elif r < -128:
                        r = -128
                    out[ch, oy, ox] = np.int8(r)

    def _conv2d_numba(x, w, stride, scale, bias, bn_en, relu_en):
        oc = w.shape[0]
        k = w.shape[2]
        oh, ow = _out_hw(x.shape[1], x.shape[2], stride)
        xt = np.ascontiguousarray(x.transpose(1, 2, 0))
        wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1))
        acc = np.empty((oc, oh, ow), dtype=np.int32)
        _conv_acc_njit(xt, wt, stride, 1 if k == 3 else 0, acc)
        out = np.empty((oc, oh, ow), dtype=np.int8)
        _post_njit(acc, scale, bias, bn_en, relu_en, out)
        return out

    def _dwconv2d_numba(x, w, stride, scale, bias, bn_en, relu_en):
        c = x.shape[0]
        oh, ow = _out_hw(x.shape[1], x.shape[2], stride)
        acc = np.empty((c, oh, ow), dtype=np.int32)
        _dwconv_acc_njit(x, w, stride, acc)
        out = np.empty((c, oh, ow), dtype=np.int8)
        _post_njit(acc, scale, bias, bn_en, relu_en, out)
        return out


_IMPLS = {
    "numpy": (_conv2d_numpy, _dwconv2d_numpy),
    "numba": ((_conv2d_numba, _dwconv2d_numba) if _BACKEND == "numba"
              else (None, None)),
}


def conv2d(x, w, stride=1, scale=None, bias=None, bn_en=False, relu_en=False,
           impl: str | None = None):
    """int8 conv (k in {1,3}), int32 accumulate, fused post-processing.

    x: (ic, ih, iw) int8, w: (oc, ic, k, k) int8, output ceil(in/stride).
    """
    fn = _IMPLS[impl or _BACKEND][0]
    return fn(x, w, stride, _as_f32(scale), _as_f32(bias), bn_en, relu_en)


def dwconv2d(x, w, stride=1, scale=None, bias=None, bn_en=False, relu_en=False,
             impl: str | None = None):
    """Per-channel 3x3 convolution; x (c, ih, iw), w (c, 3, 3)."""
    fn = _IMPLS[impl or _BACKEND][1]
    return fn(x, w, stride, _as_f32(scale), _as_f32(bias), bn_en, relu_en)


def _as_f32(vec):
    if vec is None:
        return np.zeros(1, dtype=np.float32)
    return np.asarray(vec, dtype=np.float32)


# -- simple ops (memory-bound; one shared implementation) ----------------------

def postprocess(acc, scale=None, bias=None, bn_en=False, relu_en=False):
    """Standalone bn/relu path over int values of any shape."""
    return _post_numpy(np.asarray(acc, dtype=np.int32), _as_f32(scale),
                       _as_f32(bias), bn_en, relu_en)


def add_sat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = a.astype(np.int16) + b.astype(np.int16)
    return np.clip(s, -128, 127).astype(np.int8)


def downsample2(x: np.ndarray) -> np.ndarray:
    """Keep top-left sample of each 2x2 block."""
    return x[:, ::2, ::2].copy()


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour duplication by 2 in both spatial dims."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max pooling; ragged edges use the clipped window."""
    c, h, w = x.shape
    ph, pw = h + (h & 1), w + (w & 1)
    xp = np.full((c, ph, pw), -128, dtype=np.int8)
    xp[:, :h, :w] = x
    quads = np.stack((xp[:, ::2, ::2], xp[:, ::2, 1::2],
                      xp[:, 1::2, ::2], xp[:, 1::2, 1::2]))
    return quads.max(axis=0)


def global_avg(x: np.ndarray) -> np.ndarray:
    """Per-channel mean: int32 sum, float64 divide, round-half-even."""
    c, h, w = x.shape
    sums = x.astype(np.int32).reshape(c, -1).sum(axis=1, dtype=np.int64)
    r = np.rint(sums / float(h * w))
    return np.clip(r, -128, 127).astype(np.int8).reshape(c, 1, 1)
