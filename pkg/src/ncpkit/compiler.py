"""Lower a quantized graph to a program plus a weight image.

Pipeline: ``fuse`` absorbs bn/relu layers into the preceding
convolution's post-processing flags, ``assign_layouts`` picks one
tensor-memory layout per edge, ``allocate`` maps every tensor and blob
to (bank, word offset), and ``lower`` emits one neural instruction per
fused layer (plus ``move`` pairs materializing channel concats and a
final ``end``).

Placement policy: the input image sits at word 0 of the input bank,
features ping-pong between the two feature banks with long-lived
shortcut operands packed from the top of their bank, weights fill bank2
then bank3 in emission order with folded bn parameters placed in the
word right after their convolution's weights, and graph outputs go to
the result bank.  Compilation is a pure function of (graph, TmSpec):
rerunning it yields byte-identical artifacts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import isa
from .ir import CONV_KINDS, QuantizedGraph, TensorShape
from .isa import (
    BANK_0,
    BANK_1,
    BANK_2,
    BANK_3,
    BANK_BYTES,
    BANK_I,
    BANK_NAMES,
    BANK_O,
    Instruction,
    LAYOUT_INTERLEAVED,
    LAYOUT_PIXEL_MAJOR,
    Opcode,
    OperandDesc,
    Program,
    WORD_BYTES,
)


class CompileError(ValueError):
    """Graph cannot be lowered."""


class CapacityExceeded(CompileError):
    """A tensor or blob does not fit on chip; names the offending bank."""

    def __init__(self, bank: int, needed: int, available: int, what: str = ""):
        self.bank = bank
        self.needed = needed
        self.available = available
        suffix = f" for {what}" if what else ""
        super().__init__(
            f"bank {BANK_NAMES[bank]} capacity exceeded{suffix}: "
            f"need {needed} bytes, {available} available")


@dataclass(frozen=True)
class TmSpec:
    """Tensor-memory geometry; defaults match the six-bank 992KB design."""

    bank_bytes: tuple[int, ...] = tuple(BANK_BYTES[b] for b in range(6))
    word: int = WORD_BYTES

    def words(self, bank: int) -> int:
        return self.bank_bytes[bank] // self.word


DEFAULT_TM = TmSpec()


@dataclass(frozen=True)
class Placement:
    desc: OperandDesc
    byte_len: int

    @property
    def word_len(self) -> int:
        return -(-self.byte_len // WORD_BYTES)


@dataclass
class PlacementPlan:
    placements: dict[str, Placement]          # tensor and blob ids
    liveness: dict[str, tuple[int, int]]      # tensor id -> (def, last) step
    layouts: dict[str, int]                   # tensor id -> layout
    shapes: dict[str, TensorShape]
    bank_peaks: dict[int, int]                # peak concurrent bytes per bank
    n_steps: int

    def of(self, tid: str) -> Placement:
        return self.placements[tid]


# -- fusion ---------------------------------------------------------------------


def fuse(graph: QuantizedGraph) -> QuantizedGraph:
    """Absorb bn/relu layers that directly follow a convolution.

    A bn is folded only into a convolution that has no post-ops yet; a
    relu folds into one that has no relu (the hardware applies bn before
    relu, so conv->relu->bn must stay unfused).  Fusion requires the
    convolution's output to have that single consumer and not be a graph
    output or concat operand.
    """
    layers = [replace(l) for l in graph.layers]
    protected = set(graph.output_ids)
    for a, b in graph.concats.values():
        protected.add(a)
        protected.add(b)

    changed = True
    while changed:
        changed = False
        for i, conv in enumerate(layers):
            if conv.kind not in CONV_KINDS or conv.output in protected:
                continue
            consumers = [j for j, m in enumerate(layers) if conv.output in m.inputs]
            if len(consumers) != 1:
                continue
            nxt = layers[consumers[0]]
            if nxt.kind == "bn" and not conv.bn_fused and not conv.relu_fused:
                conv.bn_fused = True
                conv.bnparam_id = nxt.bnparam_id
            elif nxt.kind == "relu" and not conv.relu_fused:
                conv.relu_fused = True
            else:
                continue
            conv.output = nxt.output
            del layers[consumers[0]]
            changed = True
            break

    fused = replace(graph, layers=layers)
    fused.check()
    return fused


# -- layout assignment ------------------------------------------------------------

_TIED_KINDS = frozenset(("bn", "relu", "dsam", "usam", "maxp"))


def assign_layouts(graph: QuantizedGraph) -> dict[str, int]:
    """One layout per tensor edge.

    Hard constraints: the operands and result of an elementwise add (and
    of layout-preserving unary ops) share a layout, and a concat
    destination is pixel-major so its channel groups are contiguous.
    Within those constraints each edge takes the layout its consumers
    prefer -- interleaved for depthwise, pixel-major for regular
    convolutions, depthwise winning when one edge feeds both kinds.  Any
    remaining producer/consumer mismatch is absorbed by the hardware
    layout converter, never by inserted copies.
    """
    parent: dict[str, str] = {}

    def find(t: str) -> str:
        parent.setdefault(t, t)
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    def union(a: str, b: str) -> None:
        parent[find(a)] = find(b)

    for layer in graph.layers:
        if layer.kind == "add":
            union(layer.inputs[0], layer.inputs[1])
            union(layer.inputs[0], layer.output)
        elif layer.kind in _TIED_KINDS:
            union(layer.inputs[0], layer.output)

    fixed: dict[str, int] = {}    # class root -> mandatory layout
    prefs: dict[str, set[int]] = {}

    for layer in graph.layers:
        if layer.kind in ("conv3x3", "conv1x1"):
            prefs.setdefault(find(layer.inputs[0]), set()).add(LAYOUT_PIXEL_MAJOR)
        elif layer.kind == "dwconv3x3":
            prefs.setdefault(find(layer.inputs[0]), set()).add(LAYOUT_INTERLEAVED)
    for tid in graph.concats:
        fixed[find(tid)] = LAYOUT_PIXEL_MAJOR

    tensors = [graph.input_id] + [l.output for l in graph.layers] + list(graph.concats)
    layouts: dict[str, int] = {}
    for tid in tensors:
        root = find(tid)
        if root in fixed:
            layouts[tid] = fixed[root]
        elif LAYOUT_INTERLEAVED in prefs.get(root, ()):
            layouts[tid] = LAYOUT_INTERLEAVED
        elif LAYOUT_PIXEL_MAJOR in prefs.get(root, ()):
            layouts[tid] = LAYOUT_PIXEL_MAJOR
        else:
            layouts[tid] = LAYOUT_PIXEL_MAJOR
    return layouts


# -- allocation -------------------------------------------------------------------

_INF = 1 << 30


@dataclass
class _Emission:
    """One lowered instruction slot (a layer or a concat move)."""

    kind: str                  # "layer" | "cmove"
    layer: object = None       # LayerOp for "layer"
    concat_id: str = ""
    part: str = ""
    part_slot: int = 0         # 0: first channel group, 1: second


def _emission_order(graph: QuantizedGraph) -> list[_Emission]:
    ready = {graph.input_id}
    ems: list[_Emission] = []
    pending = dict(graph.concats)

    def drain() -> None:
        # a concat may unlock another concat that uses it as a part
        progress = True
        while progress:
            progress = False
            for tid, (a, b) in list(pending.items()):
                if a in ready and b in ready:
                    ems.append(_Emission("cmove", concat_id=tid, part=a, part_slot=0))
                    ems.append(_Emission("cmove", concat_id=tid, part=b, part_slot=1))
                    ready.add(tid)
                    del pending[tid]
                    progress = True

    drain()
    for layer in graph.layers:
        ems.append(_Emission("layer", layer=layer))
        ready.add(layer.output)
        drain()
    if pending:
        raise CompileError(f"concat parts never produced: {sorted(pending)}")
    return ems


def _liveness(graph: QuantizedGraph, ems: list[_Emission]) -> dict[str, tuple[int, int]]:
    live: dict[str, tuple[int, int]] = {graph.input_id: (-1, -1)}
    for step, em in enumerate(ems):
        if em.kind == "layer":
            live[em.layer.output] = (step, step)
        elif em.part_slot == 0:
            live[em.concat_id] = (step, step)

    def use(tid: str, step: int) -> None:
        d, last = live[tid]
        live[tid] = (d, max(last, step))

    for step, em in enumerate(ems):
        if em.kind == "layer":
            for t in em.layer.inputs:
                use(t, step)
        else:
            use(em.part, step)
    for tid in graph.output_ids:
        use(tid, _INF)
    return live


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


class _BankFit:
    """Word-granular interval allocator for one bank."""

    def __init__(self, words: int):
        self.words = words
        self.entries: list[tuple[int, int, tuple[int, int]]] = []  # (off, len, live)

    def fit(self, word_len: int, live: tuple[int, int], from_top: bool) -> int | None:
        blocked = sorted((off, off + n) for off, n, span in self.entries
                         if _overlaps(span, live))
        gaps = []
        cur = 0
        for start, end in blocked:
            if start > cur:
                gaps.append((cur, start))
            cur = max(cur, end)
        if cur < self.words:
            gaps.append((cur, self.words))
        if from_top:
            for start, end in reversed(gaps):
                if end - start >= word_len:
                    return end - word_len
        else:
            for start, end in gaps:
                if end - start >= word_len:
                    return start
        return None

    def place(self, off: int, word_len: int, live: tuple[int, int]) -> None:
        self.entries.append((off, word_len, live))


def allocate(graph: QuantizedGraph, tm: TmSpec = DEFAULT_TM,
             layouts: dict[str, int] | None = None) -> PlacementPlan:
    """Assign every tensor and blob a (bank, word offset) home."""
    graph.check()
    if layouts is None:
        layouts = assign_layouts(graph)
    shapes = graph.shapes()
    ems = _emission_order(graph)
    live = _liveness(graph, ems)
    placements: dict[str, Placement] = {}

    # input image
    in_bytes = graph.input_shape.nbytes
    if in_bytes > tm.bank_bytes[BANK_I]:
        raise CapacityExceeded(BANK_I, in_bytes, tm.bank_bytes[BANK_I], "input image")
    placements[graph.input_id] = Placement(
        OperandDesc(BANK_I, 0, layouts[graph.input_id]), in_bytes)

    # weights and bn parameters, bank2 then bank3, bn right after its conv
    cursors = {BANK_2: 0, BANK_3: 0}

    def place_unit(blobs: list[tuple[str, int]]) -> None:
        unit_words = sum(-(-n // tm.word) for _, n in blobs)
        for bank in (BANK_2, BANK_3):
            if cursors[bank] + unit_words <= tm.words(bank):
                off = cursors[bank]
                for bid, nbytes in blobs:
                    placements[bid] = Placement(
                        OperandDesc(bank, off, LAYOUT_PIXEL_MAJOR), nbytes)
                    off += -(-nbytes // tm.word)
                cursors[bank] = off
                return
        raise CapacityExceeded(
            BANK_3, unit_words * tm.word,
            (tm.words(BANK_3) - cursors[BANK_3]) * tm.word, blobs[0][0])

    for layer in graph.layers:
        unit = []
        if layer.weight_id is not None:
            unit.append((layer.weight_id, graph.weights[layer.weight_id].nbytes))
        if layer.bnparam_id is not None:
            unit.append((layer.bnparam_id, graph.bnparams[layer.bnparam_id].nbytes))
        if unit:
            place_unit(unit)

    # features: ping-pong with long-lived tensors packed from the top
    fits = {BANK_0: _BankFit(tm.words(BANK_0)), BANK_1: _BankFit(tm.words(BANK_1))}
    out_cursor = [0]  # next free word in the result bank
    outputs = set(graph.output_ids)
    if graph.input_id in outputs:
        raise CompileError("graph input cannot be a graph output")

    def place_feature(tid: str, src_tid: str) -> None:
        nbytes = shapes[tid].nbytes
        span = live[tid]
        words = -(-nbytes // tm.word)
        if tid in outputs:
            if (out_cursor[0] + words) * tm.word > tm.bank_bytes[BANK_O]:
                raise CapacityExceeded(
                    BANK_O, nbytes,
                    tm.bank_bytes[BANK_O] - out_cursor[0] * tm.word, tid)
            placements[tid] = Placement(
                OperandDesc(BANK_O, out_cursor[0], layouts[tid]), nbytes)
            out_cursor[0] += words
            return
        src_bank = placements[src_tid].desc.bank
        preferred = BANK_1 if src_bank == BANK_0 else BANK_0
        resident = span[1] > span[0] + 1
        for bank in (preferred, BANK_1 if preferred == BANK_0 else BANK_0):
            off = fits[bank].fit(words, span, from_top=resident)
            if off is not None:
                fits[bank].place(off, words, span)
                placements[tid] = Placement(
                    OperandDesc(bank, off, layouts[tid]), nbytes)
                return
        raise CapacityExceeded(preferred, nbytes, tm.bank_bytes[preferred], tid)

    for em in ems:
        if em.kind == "layer":
            place_feature(em.layer.output, em.layer.inputs[0])
        elif em.part_slot == 0:
            a, b = graph.concats[em.concat_id]
            split = shapes[a].nbytes
            if split % tm.word:
                raise CompileError(
                    f"concat '{em.concat_id}': first group is {split} bytes, "
                    f"must be a multiple of the {tm.word}-byte word")
            # concat region keyed off its second part's bank
            place_feature(em.concat_id, b)

    # peak concurrent usage per bank
    peaks = {b: 0 for b in range(6)}
    events: dict[int, list[tuple[int, int, int]]] = {b: [] for b in range(6)}
    for tid, pl in placements.items():
        if tid in live:
            events[pl.desc.bank].append((live[tid][0], live[tid][1], pl.byte_len))
        else:  # blobs are resident for the whole run
            events[pl.desc.bank].append((-1, _INF, pl.byte_len))
    for bank, spans in events.items():
        steps = sorted({s for span in spans for s in span[:2] if s < _INF} | {0})
        for s in steps:
            total = sum(n for d, l, n in spans if d <= s <= l)
            peaks[bank] = max(peaks[bank], total)

    return PlacementPlan(placements=placements, liveness=live, layouts=layouts,
                         shapes=shapes, bank_peaks=peaks, n_steps=len(ems))


# -- lowering ---------------------------------------------------------------------

_OPCODE_OF = {
    "conv3x3": Opcode.CONV,
    "conv1x1": Opcode.CONV,
    "dwconv3x3": Opcode.DWCONV,
    "bn": Opcode.BN,
    "relu": Opcode.RELU,
    "add": Opcode.ADD,
    "move": Opcode.MOVE,
    "dsam": Opcode.DSAM,
    "usam": Opcode.USAM,
    "maxp": Opcode.MAXP,
    "gap": Opcode.GAP,
}


@dataclass
class WeightImage:
    """Byte contents of the weight banks plus a blob manifest."""

    bank2: bytes
    bank3: bytes
    manifest: list[dict] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        doc = json.dumps(self.manifest, separators=(",", ":")).encode()
        return b"NCPW" + struct.pack("<I", len(doc)) + doc + self.bank2 + self.bank3

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WeightImage":
        if raw[:4] != b"NCPW":
            raise CompileError("bad magic, not an NCPW weight image")
        (n,) = struct.unpack_from("<I", raw, 4)
        manifest = json.loads(raw[8:8 + n].decode())
        body = raw[8 + n:]
        half = BANK_BYTES[BANK_2]
        if len(body) != half + BANK_BYTES[BANK_3]:
            raise CompileError("truncated weight image")
        return cls(bank2=body[:half], bank3=body[half:], manifest=manifest)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightImage":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def blob_bytes(self, entry: dict) -> bytes:
        bank = self.bank2 if entry["bank"] == "b2" else self.bank3
        off = entry["word_off"] * WORD_BYTES
        return bank[off:off + entry["byte_len"]]


def _desc_with_layout(pl: Placement, layout: int) -> OperandDesc:
    return OperandDesc(pl.desc.bank, pl.desc.word_off, layout)


def lower(graph: QuantizedGraph, plan: PlacementPlan) -> tuple[Program, WeightImage]:
    """Emit one instruction per fused layer plus concat moves and end."""
    shapes, layouts = plan.shapes, plan.layouts
    ems = _emission_order(graph)
    ins_list: list[Instruction] = []

    def feat_desc(tid: str) -> OperandDesc:
        return _desc_with_layout(plan.of(tid), layouts[tid])

    for em in ems:
        if em.kind == "cmove":
            a, b = graph.concats[em.concat_id]
            part = em.part
            pshape = shapes[part]
            base = plan.of(em.concat_id)
            off_words = 0 if em.part_slot == 0 else shapes[a].nbytes // WORD_BYTES
            dst = OperandDesc(base.desc.bank, base.desc.word_off + off_words,
                              LAYOUT_PIXEL_MAJOR)
            ins_list.append(Instruction(
                opcode=Opcode.MOVE, ih=pshape.h, iw=pshape.w, ic=pshape.c,
                src0=feat_desc(part), dst=dst))
            continue

        layer = em.layer
        in_shape = shapes[layer.inputs[0]]
        fields = dict(
            opcode=_OPCODE_OF[layer.kind],
            ih=in_shape.h, iw=in_shape.w, ic=in_shape.c,
            src0=feat_desc(layer.inputs[0]),
            dst=feat_desc(layer.output),
        )
        if layer.kind in ("conv3x3", "conv1x1"):
            fields.update(
                oc=graph.weights[layer.weight_id].data.shape[0],
                k3=layer.kind == "conv3x3",
                stride=layer.stride,
                bn_en=layer.bn_fused, relu_en=layer.relu_fused,
                src1=plan.of(layer.weight_id).desc,
            )
            if layer.bn_fused:
                fields["par"] = plan.of(layer.bnparam_id).desc
        elif layer.kind == "dwconv3x3":
            fields.update(
                stride=layer.stride,
                bn_en=layer.bn_fused, relu_en=layer.relu_fused,
                src1=plan.of(layer.weight_id).desc,
            )
            if layer.bn_fused:
                fields["par"] = plan.of(layer.bnparam_id).desc
        elif layer.kind == "bn":
            fields["par"] = plan.of(layer.bnparam_id).desc
        elif layer.kind == "add":
            fields["src1"] = feat_desc(layer.inputs[1])
        ins_list.append(Instruction(**fields))

    ins_list.append(Instruction(opcode=Opcode.END))
    program = Program(ins_list)

    # weight image
    bank2 = bytearray(BANK_BYTES[BANK_2])
    bank3 = bytearray(BANK_BYTES[BANK_3])
    manifest = []
    for layer in graph.layers:
        for bid in (layer.weight_id, layer.bnparam_id):
            if bid is None:
                continue
            pl = plan.of(bid)
            if bid in graph.weights:
                raw = graph.weights[bid].data.tobytes()
            else:
                p = graph.bnparams[bid]
                raw = np.stack((p.scale, p.bias), axis=1).astype("<f4").tobytes()
            buf = bank2 if pl.desc.bank == BANK_2 else bank3
            off = pl.desc.byte_off
            buf[off:off + len(raw)] = raw
            manifest.append({"id": bid, "bank": BANK_NAMES[pl.desc.bank],
                             "word_off": pl.desc.word_off, "byte_len": len(raw)})
    return program, WeightImage(bytes(bank2), bytes(bank3), manifest)


@dataclass
class CompileResult:
    program: Program
    weight_image: WeightImage
    plan: PlacementPlan
    fused: QuantizedGraph


def compile_graph(graph: QuantizedGraph, tm: TmSpec = DEFAULT_TM) -> CompileResult:
    """fuse -> assign_layouts -> allocate -> lower, as one deterministic step."""
    fused = fuse(graph)
    layouts = assign_layouts(fused)
    plan = allocate(fused, tm, layouts)
    program, image = lower(fused, plan)
    return CompileResult(program, image, plan, fused)


def memory_report(plan: PlacementPlan, tm: TmSpec = DEFAULT_TM) -> dict:
    """Per-bank peaks, placement table and the total on-chip requirement."""
    banks = []
    for bank in range(6):
        banks.append({
            "bank": BANK_NAMES[bank],
            "peak_bytes": plan.bank_peaks.get(bank, 0),
            "capacity": tm.bank_bytes[bank],
        })
    table = [
        {"id": tid, "bank": BANK_NAMES[pl.desc.bank], "word_off": pl.desc.word_off,
         "byte_len": pl.byte_len}
        for tid, pl in sorted(plan.placements.items())
    ]
    return {
        "banks": banks,
        "placements": table,
        "total_peak_bytes": sum(b["peak_bytes"] for b in banks),
        "total_capacity": sum(tm.bank_bytes),
    }


def memory_report_text(plan: PlacementPlan, tm: TmSpec = DEFAULT_TM) -> str:
    doc = memory_report(plan, tm)
    lines = ["bank  peak_bytes  capacity"]
    for b in doc["banks"]:
        lines.append(f"{b['bank']:<4}  {b['peak_bytes']:>10}  {b['capacity']:>8}")
    lines.append(f"total peak {doc['total_peak_bytes']} of {doc['total_capacity']} bytes")
    lines.append("")
    lines.append("id                bank  word_off  bytes")
    for row in doc["placements"]:
        lines.append(f"{row['id']:<16}  {row['bank']:<4}  {row['word_off']:>8}  "
                     f"{row['byte_len']:>6}")
    return "\n".join(lines) + "\n"
