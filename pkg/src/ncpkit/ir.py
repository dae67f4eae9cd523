"""Quantized CNN graph IR.

Tensors are int8 with shape (c, h, w) in canonical pixel-major order.
Convolution weights are int8 blobs, batch-norm parameters are pre-folded
per-channel float32 (scale, bias) pairs applied to the int32 accumulator.
Graphs are DAGs of single-output layers plus an optional table of
channel-concatenation tensors (realized by the compiler with ``move``
instructions).

Everything here has value semantics: construction and queries are
side-effect free and safe to share read-only across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MAX_HW = 256
MAX_CHANNELS = 1024
FEATURE_BANK_BYTES = 131072  # hard per-tensor feature budget (one bank)

CONV_KINDS = frozenset(("conv3x3", "conv1x1", "dwconv3x3"))
VALID_KINDS = CONV_KINDS | frozenset(
    ("bn", "relu", "add", "move", "dsam", "usam", "maxp", "gap")
)


class IrError(ValueError):
    """Invalid shape, layer or graph."""


@dataclass(frozen=True)
class TensorShape:
    h: int
    w: int
    c: int

    def __post_init__(self):
        if not (1 <= self.h <= MAX_HW and 1 <= self.w <= MAX_HW):
            raise IrError(f"spatial dims out of range: {self.h}x{self.w}")
        if not 1 <= self.c <= MAX_CHANNELS:
            raise IrError(f"channel count out of range: {self.c}")

    @property
    def nbytes(self) -> int:
        return self.h * self.w * self.c


@dataclass
class WeightBlob:
    """int8 kernel data; (out_c, in_c, k, k) for conv, (c, 3, 3) for dwconv."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise IrError("weight blobs must be int8")
        if self.data.ndim not in (3, 4):
            raise IrError(f"bad weight rank {self.data.ndim}")

    @property
    def nbytes(self) -> int:
        return int(self.data.size)


@dataclass
class BnParams:
    """Pre-folded per-channel float32 (scale, bias)."""

    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.scale.shape != self.bias.shape or self.scale.ndim != 1:
            raise IrError("scale/bias must be matching 1-d arrays")
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale == 0):
            raise IrError("bn scales must be finite and nonzero")
        if not np.all(np.isfinite(self.bias)):
            raise IrError("bn biases must be finite")

    @property
    def channels(self) -> int:
        return int(self.scale.size)

    @property
    def nbytes(self) -> int:
        return 8 * self.channels


@dataclass
class LayerOp:
    """One graph node.  ``inputs``/``output`` are tensor ids."""

    kind: str
    inputs: list[str]
    output: str
    stride: int = 1
    bn_fused: bool = False
    relu_fused: bool = False
    weight_id: str | None = None
    bnparam_id: str | None = None

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise IrError(f"unknown layer kind '{self.kind}'")
        if self.stride not in (1, 2):
            raise IrError(f"bad stride {self.stride}")
        if self.stride == 2 and self.kind not in ("conv3x3", "conv1x1", "dwconv3x3"):
            raise IrError(f"stride 2 not allowed for {self.kind}")
        if (self.bn_fused or self.relu_fused) and self.kind not in CONV_KINDS:
            raise IrError(f"fused bn/relu only on convolutions, not {self.kind}")
        if (self.weight_id is not None) != (self.kind in CONV_KINDS):
            raise IrError(f"weight_id present iff convolution ({self.kind})")
        n_in = 2 if self.kind == "add" else 1
        if len(self.inputs) != n_in:
            raise IrError(f"{self.kind} takes {n_in} input(s)")


@dataclass
class QuantizedGraph:
    """Layer DAG with blob tables and explicit input/output tensors."""

    input_id: str
    input_shape: TensorShape
    layers: list[LayerOp] = field(default_factory=list)
    weights: dict[str, WeightBlob] = field(default_factory=dict)
    bnparams: dict[str, BnParams] = field(default_factory=dict)
    # tensor id -> (first, second): channel concat of two produced tensors
    concats: dict[str, tuple[str, str]] = field(default_factory=dict)
    output_ids: list[str] = field(default_factory=list)

    def check(self) -> None:
        produced = {self.input_id}
        used_blobs = set()

        def available(t: str, seen=()) -> bool:
            if t in produced:
                return True
            if t in self.concats and t not in seen:
                a, b = self.concats[t]
                return available(a, seen + (t,)) and available(b, seen + (t,))
            return False

        for i, layer in enumerate(self.layers):
            for t in layer.inputs:
                if not available(t):
                    raise IrError(f"layer {i} consumes unknown tensor '{t}'")
            if layer.output in produced or layer.output in self.concats:
                raise IrError(f"tensor '{layer.output}' produced twice")
            produced.add(layer.output)
            if layer.weight_id is not None:
                if layer.weight_id not in self.weights:
                    raise IrError(f"missing weight blob '{layer.weight_id}'")
                used_blobs.add(layer.weight_id)
            if layer.bnparam_id is not None:
                if layer.bnparam_id not in self.bnparams:
                    raise IrError(f"missing bn blob '{layer.bnparam_id}'")
                used_blobs.add(layer.bnparam_id)
        for t in self.output_ids:
            if t not in produced and t not in self.concats:
                raise IrError(f"graph output '{t}' never produced")
        for blob in list(self.weights) + list(self.bnparams):
            if blob not in used_blobs:
                raise IrError(f"blob '{blob}' is never referenced")

    def producer_of(self, tensor_id: str) -> LayerOp | None:
        for layer in self.layers:
            if layer.output == tensor_id:
                return layer
        return None

    def consumers_of(self, tensor_id: str) -> list[LayerOp]:
        return [l for l in self.layers if tensor_id in l.inputs]

    def shapes(self) -> dict[str, TensorShape]:
        """Propagate shapes; raises IrError on any inconsistency."""
        shapes = {self.input_id: self.input_shape}

        def resolve(tid: str) -> TensorShape:
            if tid in shapes:
                return shapes[tid]
            if tid in self.concats:
                a, b = self.concats[tid]
                sa, sb = resolve(a), resolve(b)
                if (sa.h, sa.w) != (sb.h, sb.w):
                    raise IrError(f"concat '{tid}' mixes spatial sizes")
                shapes[tid] = TensorShape(sa.h, sa.w, sa.c + sb.c)
                return shapes[tid]
            raise IrError(f"no shape for tensor '{tid}'")

        for layer in self.layers:
            shapes[layer.output] = infer_shape(
                layer, [resolve(t) for t in layer.inputs], self)
        for tid in self.concats:
            resolve(tid)
        return shapes

    def param_count(self) -> tuple[int, int, int]:
        """(weight_bytes, bn_bytes, total_bytes); deterministic and additive."""
        w = sum(blob.nbytes for blob in self.weights.values())
        b = sum(p.nbytes for p in self.bnparams.values())
        return w, b, w + b

    def max_feature_bytes(self) -> int:
        """Largest live feature footprint in bytes.

        Counts every produced tensor plus, for shortcuts (elementwise add)
        and channel concats, the operand pair as simultaneously live.  The
        graph input is excluded: it resides in the dedicated input bank.
        """
        shapes = self.shapes()
        peak = 0
        for layer in self.layers:
            peak = max(peak, shapes[layer.output].nbytes)
            if layer.kind == "add":
                peak = max(peak, sum(shapes[t].nbytes for t in layer.inputs))
        for tid in self.concats:
            peak = max(peak, shapes[tid].nbytes)
        return peak


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def infer_shape(layer: LayerOp, in_shapes: list[TensorShape],
                graph: QuantizedGraph | None = None) -> TensorShape:
    """Output shape of one layer given its input shapes."""
    s0 = in_shapes[0]
    kind = layer.kind
    if kind in ("conv3x3", "conv1x1"):
        if graph is not None:
            blob = graph.weights[layer.weight_id]
            oc, ic = blob.data.shape[0], blob.data.shape[1]
            if ic != s0.c:
                raise IrError(f"conv expects {ic} input channels, got {s0.c}")
        else:
            oc = s0.c
        return TensorShape(_ceil_div(s0.h, layer.stride),
                           _ceil_div(s0.w, layer.stride), oc)
    if kind == "dwconv3x3":
        if graph is not None:
            c = graph.weights[layer.weight_id].data.shape[0]
            if c != s0.c:
                raise IrError(f"dwconv expects {c} channels, got {s0.c}")
        return TensorShape(_ceil_div(s0.h, layer.stride),
                           _ceil_div(s0.w, layer.stride), s0.c)
    if kind in ("bn", "relu", "move"):
        return s0
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise IrError("add operands must have identical shapes")
        return s0
    if kind in ("dsam", "maxp"):
        return TensorShape(_ceil_div(s0.h, 2), _ceil_div(s0.w, 2), s0.c)
    if kind == "usam":
        return TensorShape(s0.h * 2, s0.w * 2, s0.c)
    if kind == "gap":
        return TensorShape(1, 1, s0.c)
    raise IrError(f"unknown kind '{kind}'")


def concat_graphs(a: QuantizedGraph, b: QuantizedGraph) -> QuantizedGraph:
    """Chain two graphs: b's input becomes a's (single) output."""
    if len(a.output_ids) != 1:
        raise IrError("can only chain through a single output")
    rename = {b.input_id: a.output_ids[0]}

    def rn(t: str) -> str:
        return rename.get(t, "g2." + t)

    layers = [
        replace(l, inputs=[rn(t) for t in l.inputs], output=rn(l.output),
                weight_id=None if l.weight_id is None else "g2." + l.weight_id,
                bnparam_id=None if l.bnparam_id is None else "g2." + l.bnparam_id)
        for l in b.layers
    ]
    return QuantizedGraph(
        input_id=a.input_id,
        input_shape=a.input_shape,
        layers=a.layers + layers,
        weights={**a.weights, **{"g2." + k: v for k, v in b.weights.items()}},
        bnparams={**a.bnparams, **{"g2." + k: v for k, v in b.bnparams.items()}},
        concats={**a.concats,
                 **{rn(k): (rn(x), rn(y)) for k, (x, y) in b.concats.items()}},
        output_ids=[rn(t) for t in b.output_ids],
    )
