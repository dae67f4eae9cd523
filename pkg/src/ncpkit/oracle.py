"""Scalar reference interpreter for quantized graphs.

Ground truth for every operation: plain loop-based convolutions over
canonical (c, h, w) arrays, no tensor-memory model, no layouts.  The
arithmetic contract (docs/arithmetic.md) is shared with the simulator
but the code here is an independent path -- it must never import the
simulator kernels, so a divergence between the two is always a bug in
one of them rather than a shared assumption.

Pure functions throughout; embarrassingly parallel across test cases.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .ir import IrError, QuantizedGraph, TensorShape
from .isa import LAYOUT_INTERLEAVED, LAYOUT_PIXEL_MAJOR


@dataclass
class RefTensor:
    shape: TensorShape
    data: np.ndarray  # int8, (c, h, w)

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise IrError("reference tensors are int8")
        expect = (self.shape.c, self.shape.h, self.shape.w)
        if self.data.shape != expect:
            raise IrError(f"data shape {self.data.shape} != {expect}")

    def to_bytes(self) -> bytes:
        head = b"NCPT" + struct.pack("<HHH", self.shape.h, self.shape.w, self.shape.c)
        return head + self.data.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RefTensor":
        if raw[:4] != b"NCPT":
            raise IrError("bad magic, not a tensor dump")
        h, w, c = struct.unpack_from("<HHH", raw, 4)
        data = np.frombuffer(raw, dtype=np.int8, offset=10).reshape(c, h, w)
        return cls(TensorShape(h, w, c), data.copy())


def _requant(acc: np.ndarray, scale, bias, bn: bool, relu: bool) -> np.ndarray:
    """float32 bn, relu before rounding, round-half-even, saturate."""
    v = acc.astype(np.float32)
    if bn:
        v = v * np.float32(scale)[:, None, None]
        v = v + np.float32(bias)[:, None, None]
    if relu:
        v = np.maximum(v, np.float32(0.0))
    return np.clip(np.rint(v).astype(np.int64), -128, 127).astype(np.int8)


def _pad1(x32: np.ndarray) -> np.ndarray:
    c, h, w = x32.shape
    out = np.zeros((c, h + 2, w + 2), dtype=np.int32)
    out[:, 1:-1, 1:-1] = x32
    return out


def _ref_conv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Direct convolution: loops over output channel and kernel tap."""
    oc, ic, k, _ = w.shape
    _, ih, iw = x.shape
    oh, ow = -(-ih // stride), -(-iw // stride)
    x32 = x.astype(np.int32)
    if k == 3:
        x32 = _pad1(x32)
    acc = np.zeros((oc, oh, ow), dtype=np.int32)
    for o in range(oc):
        for ky in range(k):
            for kx in range(k):
                win = x32[:,
                          ky:ky + (oh - 1) * stride + 1:stride,
                          kx:kx + (ow - 1) * stride + 1:stride]
                acc[o] += np.tensordot(w[o, :, ky, kx].astype(np.int32), win,
                                       axes=([0], [0]))
    return acc


def _ref_dwconv(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    c, ih, iw = x.shape
    oh, ow = -(-ih // stride), -(-iw // stride)
    x32 = _pad1(x.astype(np.int32))
    acc = np.zeros((c, oh, ow), dtype=np.int32)
    for ch in range(c):
        for ky in range(3):
            for kx in range(3):
                win = x32[ch,
                          ky:ky + (oh - 1) * stride + 1:stride,
                          kx:kx + (ow - 1) * stride + 1:stride]
                acc[ch] += int(w[ch, ky, kx]) * win
    return acc


def ref_run(graph: QuantizedGraph, inp: RefTensor) -> RefTensor:
    """Execute a graph; returns the (single) graph output tensor."""
    if inp.shape != graph.input_shape:
        raise IrError(f"input is {inp.shape}, graph wants {graph.input_shape}")
    graph.check()
    env: dict[str, np.ndarray] = {graph.input_id: inp.data}

    def fetch(tid: str) -> np.ndarray:
        if tid not in env and tid in graph.concats:
            a, b = graph.concats[tid]
            env[tid] = np.concatenate((fetch(a), fetch(b)), axis=0)
        return env[tid]

    for layer in graph.layers:
        x = fetch(layer.inputs[0])
        kind = layer.kind
        if kind in ("conv3x3", "conv1x1", "dwconv3x3"):
            wb = graph.weights[layer.weight_id].data
            if kind == "dwconv3x3":
                acc = _ref_dwconv(x, wb, layer.stride)
            else:
                acc = _ref_conv(x, wb, layer.stride)
            if layer.bn_fused:
                bn = graph.bnparams[layer.bnparam_id]
                y = _requant(acc, bn.scale, bn.bias, True, layer.relu_fused)
            else:
                y = _requant(acc, None, None, False, layer.relu_fused)
        elif kind == "bn":
            bn = graph.bnparams[layer.bnparam_id]
            y = _requant(x.astype(np.int32), bn.scale, bn.bias, True, False)
        elif kind == "relu":
            y = np.maximum(x, np.int8(0))
        elif kind == "add":
            b = fetch(layer.inputs[1])
            y = np.clip(x.astype(np.int16) + b.astype(np.int16),
                        -128, 127).astype(np.int8)
        elif kind == "move":
            y = x.copy()
        elif kind == "dsam":
            y = x[:, ::2, ::2].copy()
        elif kind == "usam":
            y = x.repeat(2, axis=1).repeat(2, axis=2)
        elif kind == "maxp":
            c, h, w = x.shape
            padded = np.full((c, h + (h & 1), w + (w & 1)), -128, dtype=np.int8)
            padded[:, :h, :w] = x
            y = np.maximum(
                np.maximum(padded[:, ::2, ::2], padded[:, ::2, 1::2]),
                np.maximum(padded[:, 1::2, ::2], padded[:, 1::2, 1::2]))
        elif kind == "gap":
            c, h, w = x.shape
            sums = x.astype(np.int64).reshape(c, -1).sum(axis=1)
            y = np.clip(np.rint(sums / float(h * w)), -128, 127)
            y = y.astype(np.int8).reshape(c, 1, 1)
        else:
            raise IrError(f"unknown kind '{kind}'")
        env[layer.output] = y

    if len(graph.output_ids) != 1:
        raise IrError("ref_run expects exactly one graph output")
    out = fetch(graph.output_ids[0])
    c, h, w = out.shape
    return RefTensor(TensorShape(h, w, c), out)


@dataclass(frozen=True)
class CompareResult:
    equal: bool
    mismatch_index: int  # flat canonical index of first difference, -1 if equal
    expected: int = 0
    actual: int = 0

    def __str__(self) -> str:
        if self.equal:
            return "equal"
        return (f"mismatch at flat index {self.mismatch_index}: "
                f"expected {self.expected}, got {self.actual}")


def _delinearize(raw: np.ndarray, shape: TensorShape, layout: int,
                 t_tm: int) -> np.ndarray:
    """Layout decode by index arithmetic (independent of the simulator's)."""
    c, h, w = shape.c, shape.h, shape.w
    if layout == LAYOUT_PIXEL_MAJOR:
        return raw.reshape(c, h, w)
    if layout != LAYOUT_INTERLEAVED:
        raise IrError(f"unknown layout {layout}")
    ch = np.arange(c)
    tile = ch // t_tm
    local = ch - tile * t_tm
    width = np.minimum(t_tm, c - tile * t_tm)
    tile_base = np.concatenate(([0], np.cumsum(
        [min(t_tm, c - t0) * h * w for t0 in range(0, c, t_tm)])))[:-1]
    pix = np.arange(h * w)
    # source byte index of logical element (ch, pixel)
    src = tile_base[tile][:, None] + pix[None, :] * width[:, None] + local[:, None]
    return raw[src].reshape(c, h, w)


def compare(ref: RefTensor, raw: bytes | np.ndarray, layout: int,
            t_tm: int = 32) -> CompareResult:
    """Check simulator output bytes (in TM layout) against a reference."""
    buf = np.frombuffer(raw, dtype=np.int8) if isinstance(raw, (bytes, bytearray)) \
        else np.asarray(raw, dtype=np.int8)
    if buf.size != ref.shape.nbytes:
        raise IrError(f"byte count {buf.size} != tensor size {ref.shape.nbytes}")
    got = _delinearize(buf, ref.shape, layout, t_tm)
    diff = got != ref.data
    if not diff.any():
        return CompareResult(True, -1)
    idx = int(np.argmax(diff.reshape(-1)))
    return CompareResult(False, idx, int(ref.data.reshape(-1)[idx]),
                         int(got.reshape(-1)[idx]))
