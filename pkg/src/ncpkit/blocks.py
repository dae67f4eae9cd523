"""Builders for the depthwise backbone blocks and full model graphs.

Two block families make up a backbone:

* LB  -- linear depthwise block: dwconv3x3 (bn, no relu) -> conv1x1
         (bn+relu) -> dwconv3x3 (bn+relu).  The leading depthwise layer
         is deliberately kept linear.
* DLB -- LB with shortcut connections at the end of both layer groups;
         the outer merge is either an elementwise ``add`` or a channel
         ``concat`` of block input and output.

A backbone is stem layers, a list of (block, n, c, s) stages, a 1x1
head convolution and global average pooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .ir import (
    BnParams,
    FEATURE_BANK_BYTES,
    IrError,
    LayerOp,
    QuantizedGraph,
    TensorShape,
    WeightBlob,
)

STEM_KINDS = frozenset(
    ("conv3x3", "conv1x1", "dwconv3x3", "bn", "relu", "maxp", "dsam", "usam")
)


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "lb" | "dlb"
    in_c: int
    mid_c: int
    out_c: int
    stride: int = 1
    dlb_merge: str = "add"  # "add" | "concat" (DLB only)

    def __post_init__(self):
        if self.kind not in ("lb", "dlb"):
            raise IrError(f"unknown block kind '{self.kind}'")
        if self.stride not in (1, 2):
            raise IrError(f"bad block stride {self.stride}")
        if min(self.in_c, self.mid_c, self.out_c) < 1:
            raise IrError("invalid channel counts")
        if self.mid_c != self.out_c:
            raise IrError("mid_c must equal out_c (block ends in a depthwise layer)")
        if self.kind == "dlb":
            if self.dlb_merge not in ("add", "concat"):
                raise IrError(f"unknown dlb merge '{self.dlb_merge}'")
            if (self.dlb_merge == "add" and self.stride == 1
                    and self.in_c != self.out_c):
                raise IrError("add-merge shortcut needs in_c == out_c")


@dataclass(frozen=True)
class StemOp:
    kind: str
    c: int = 0        # output channels, conv kinds only
    s: int = 1

    def __post_init__(self):
        if self.kind not in STEM_KINDS:
            raise IrError(f"unsupported stem op '{self.kind}'")


@dataclass(frozen=True)
class StageSpec:
    block: str  # "lb" | "dlb"
    n: int
    c: int
    s: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    input: TensorShape
    stem: tuple[StemOp, ...]
    stages: tuple[StageSpec, ...]
    head_c: int
    dlb_merge: str = "add"

    def __post_init__(self):
        seen_dlb = False
        for st in self.stages:
            if st.block == "dlb":
                seen_dlb = True
            elif seen_dlb:
                raise IrError("lb stages must precede all dlb stages")


class _Builder:
    """Accumulates layers/blobs with sequential ids."""

    def __init__(self, input_shape: TensorShape):
        self.graph = QuantizedGraph(input_id="in", input_shape=input_shape)
        self._n_tensor = 0
        self._n_layer = 0

    def tensor(self) -> str:
        self._n_tensor += 1
        return f"t{self._n_tensor}"

    def add_layer(self, kind: str, inputs: list[str], **kw) -> str:
        out = self.tensor()
        self.graph.layers.append(LayerOp(kind, inputs, out, **kw))
        return out

    def conv(self, kind: str, src: str, in_c: int, out_c: int, stride: int,
             relu: bool) -> str:
        lid = f"L{self._n_layer:03d}"
        self._n_layer += 1
        if kind == "dwconv3x3":
            w = np.zeros((out_c, 3, 3), dtype=np.int8)
        else:
            k = 3 if kind == "conv3x3" else 1
            w = np.zeros((out_c, in_c, k, k), dtype=np.int8)
        self.graph.weights[lid + ".w"] = WeightBlob(w)
        self.graph.bnparams[lid + ".bn"] = BnParams(
            np.ones(out_c, dtype=np.float32), np.zeros(out_c, dtype=np.float32))
        return self.add_layer(kind, [src], stride=stride, bn_fused=True,
                              relu_fused=relu, weight_id=lid + ".w",
                              bnparam_id=lid + ".bn")

    def standalone_bn(self, src: str, c: int) -> str:
        lid = f"L{self._n_layer:03d}"
        self._n_layer += 1
        self.graph.bnparams[lid + ".bn"] = BnParams(
            np.ones(c, dtype=np.float32), np.zeros(c, dtype=np.float32))
        return self.add_layer("bn", [src], bnparam_id=lid + ".bn")


def build_lb(spec: BlockSpec, builder: _Builder, src: str) -> str:
    """dwconv (bn only) -> conv1x1 (bn+relu) -> dwconv (bn+relu)."""
    if spec.kind != "lb":
        raise IrError("build_lb needs an lb spec")
    t = builder.conv("dwconv3x3", src, spec.in_c, spec.in_c, spec.stride, relu=False)
    t = builder.conv("conv1x1", t, spec.in_c, spec.mid_c, 1, relu=True)
    t = builder.conv("dwconv3x3", t, spec.mid_c, spec.out_c, 1, relu=True)
    return t


def build_dlb(spec: BlockSpec, builder: _Builder, src: str) -> str:
    """LB body with shortcuts at the end of both layer groups.

    add merge, stride 1:  u = conv1x1(dwconv(x));  a = u + x;
                          out = dwconv(a) + u
    stride 2 drops the input shortcut (resolution changes across it).
    concat merge returns channel-concat(x, body) instead of the input
    add; the inner u-shortcut is kept in both variants.
    """
    if spec.kind != "dlb":
        raise IrError("build_dlb needs a dlb spec")
    d1 = builder.conv("dwconv3x3", src, spec.in_c, spec.in_c, spec.stride, relu=False)
    u = builder.conv("conv1x1", d1, spec.in_c, spec.mid_c, 1, relu=True)

    body_in = u
    if spec.dlb_merge == "add" and spec.stride == 1:
        body_in = builder.add_layer("add", [u, src])
    d2 = builder.conv("dwconv3x3", body_in, spec.mid_c, spec.out_c, 1, relu=True)
    out = builder.add_layer("add", [d2, u])

    if spec.dlb_merge == "concat" and spec.stride == 1:
        total = spec.in_c + spec.out_c
        if total > 1024:
            raise IrError(f"concat output of {total} channels exceeds 1024")
        cid = builder.tensor()
        builder.graph.concats[cid] = (src, out)
        return cid
    return out


def build_backbone(cfg: BackboneConfig) -> QuantizedGraph:
    """Stem, stages, 1x1 head and global average pooling."""
    b = _Builder(cfg.input)
    t = b.graph.input_id
    c = cfg.input.c
    for op in cfg.stem:
        if op.kind in ("conv3x3", "conv1x1"):
            t = b.conv(op.kind, t, c, op.c, op.s, relu=True)
            c = op.c
        elif op.kind == "dwconv3x3":
            t = b.conv(op.kind, t, c, c, op.s, relu=True)
        elif op.kind == "bn":
            t = b.standalone_bn(t, c)
        else:
            t = b.add_layer(op.kind, [t])

    for stage in cfg.stages:
        for i in range(stage.n):
            spec = BlockSpec(stage.block, in_c=c, mid_c=stage.c, out_c=stage.c,
                             stride=stage.s if i == 0 else 1,
                             dlb_merge=cfg.dlb_merge)
            if stage.block == "lb":
                t = build_lb(spec, b, t)
                c = stage.c
            else:
                t = build_dlb(spec, b, t)
                c = stage.c + (c if cfg.dlb_merge == "concat" and spec.stride == 1
                               else 0)

    t = b.conv("conv1x1", t, c, cfg.head_c, 1, relu=True)
    t = b.add_layer("gap", [t])
    b.graph.output_ids = [t]
    b.graph.check()

    worst = b.graph.max_feature_bytes()
    if worst > FEATURE_BANK_BYTES:
        raise IrError(
            f"intermediate feature of {worst} bytes exceeds the "
            f"{FEATURE_BANK_BYTES}-byte feature banks b0/b1")
    return b.graph


def default_backbone_config() -> BackboneConfig:
    """The bundled 256x256 backbone.

    Chosen to satisfy every hardware budget at once: ~487KB parameters
    (including folded bn) inside the 512KB weight banks, every feature
    tensor within one 128KB bank, and a modeled latency in the
    mid-single-digit milliseconds at 250MHz.
    """
    return BackboneConfig(
        input=TensorShape(256, 256, 3),
        stem=(StemOp("conv3x3", c=8, s=2),),
        stages=(
            StageSpec("lb", n=12, c=8, s=1),
            StageSpec("lb", n=10, c=32, s=2),
            StageSpec("lb", n=12, c=128, s=2),
            StageSpec("dlb", n=3, c=192, s=2),
        ),
        head_c=512,
        dlb_merge="add",
    )


def _round8(c: float) -> int:
    return max(8, int(round(c / 8)) * 8)


def scale_widths(cfg: BackboneConfig, alpha: float) -> BackboneConfig:
    """Width multiplier: channels scaled and rounded to multiples of 8."""
    if not 0 < alpha <= 1:
        raise IrError("width multiplier must be in (0, 1]")
    stem = tuple(
        replace(op, c=_round8(op.c * alpha)) if op.kind in ("conv3x3", "conv1x1")
        else op
        for op in cfg.stem)
    stages = tuple(replace(st, c=_round8(st.c * alpha)) for st in cfg.stages)
    return replace(cfg, stem=stem, stages=stages, head_c=_round8(cfg.head_c * alpha))


def random_model(seed: int, cfg: BackboneConfig) -> QuantizedGraph:
    """Backbone with deterministic pseudo-random weights and bn params."""
    graph = build_backbone(cfg)
    rng = np.random.default_rng(seed)
    for blob in graph.weights.values():
        blob.data = rng.integers(-128, 128, size=blob.data.shape,
                                 dtype=np.int64).astype(np.int8)
    for params in graph.bnparams.values():
        n = params.channels
        params.scale = rng.uniform(0.001, 0.1, size=n).astype(np.float32)
        params.bias = rng.uniform(-1.0, 1.0, size=n).astype(np.float32)
    return graph


# -- config (de)serialization -------------------------------------------------

def config_to_dict(cfg: BackboneConfig) -> dict:
    stem = []
    for op in cfg.stem:
        entry = {"kind": op.kind}
        if op.kind in ("conv3x3", "conv1x1"):
            entry["c"] = op.c
        if op.kind in ("conv3x3", "conv1x1", "dwconv3x3"):
            entry["s"] = op.s
        stem.append(entry)
    return {
        "input": {"h": cfg.input.h, "w": cfg.input.w, "c": cfg.input.c},
        "stem": stem,
        "stages": [{"block": st.block, "n": st.n, "c": st.c, "s": st.s}
                   for st in cfg.stages],
        "head_c": cfg.head_c,
        "dlb_merge": cfg.dlb_merge,
    }


def config_from_dict(doc: dict) -> BackboneConfig:
    try:
        inp = doc["input"]
        shape = TensorShape(int(inp["h"]), int(inp["w"]), int(inp["c"]))
        stem = tuple(
            StemOp(entry["kind"], c=int(entry.get("c", 0)),
                   s=int(entry.get("s", 1)))
            for entry in doc.get("stem", ()))
        stages = tuple(
            StageSpec(entry["block"], n=int(entry["n"]), c=int(entry["c"]),
                      s=int(entry.get("s", 1)))
            for entry in doc.get("stages", ()))
        return BackboneConfig(input=shape, stem=stem, stages=stages,
                              head_c=int(doc["head_c"]),
                              dlb_merge=doc.get("dlb_merge", "add"))
    except (KeyError, TypeError) as exc:
        raise IrError(f"malformed backbone config: {exc}") from None


def save_config(cfg: BackboneConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


def load_config(path) -> BackboneConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def load_model(config_path, weights_path=None, seed: int = 0) -> QuantizedGraph:
    """Graph from a config file; blob data from a weight image or a seed.

    Blob ids are assigned deterministically by the builders, so a weight
    image produced by compiling this config maps back onto the same
    graph exactly.
    """
    cfg = load_config(config_path)
    if weights_path is None:
        return random_model(seed, cfg)
    from .compiler import WeightImage

    graph = build_backbone(cfg)
    image = WeightImage.load(weights_path)
    entries = {e["id"]: e for e in image.manifest}
    for wid, blob in graph.weights.items():
        if wid not in entries:
            raise IrError(f"weight image is missing blob '{wid}'")
        raw = image.blob_bytes(entries[wid])
        blob.data = np.frombuffer(raw, dtype=np.int8).reshape(blob.data.shape).copy()
    for bid, params in graph.bnparams.items():
        if bid not in entries:
            raise IrError(f"weight image is missing blob '{bid}'")
        pairs = np.frombuffer(image.blob_bytes(entries[bid]),
                              dtype="<f4").reshape(-1, 2)
        params.scale = np.ascontiguousarray(pairs[:, 0])
        params.bias = np.ascontiguousarray(pairs[:, 1])
    return graph
