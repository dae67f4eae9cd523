"""Instruction set: 13 opcodes, 128-bit fixed-width encoding.

Bit layout of an encoded instruction word (little-endian byte order):

    [4:0]     opcode (0x01..0x0D, 0x00 is illegal)
    [5]       bn_en          [6] relu_en        [7] reserved (0)
    [8]       k3 (conv kernel is 3x3)
    [10:9]    stride, stored literally (1 or 2; 0 when unused)
    [19:11]   ih   [28:20] iw   [39:29] ic   [50:40] oc
    [67:51]   src0  [84:68] src1  [101:85] dst  [118:102] par
    [127:119] reserved (0)

Each operand descriptor is 17 bits: bank[2:0], word_off[15:3] and
layout[16] (0 = pixel-major, 1 = interleaved).  Addresses are in 32-byte
tensor-memory words.  ``jump`` instead stores a 16-bit target at [20:5].

Canonical form: every field an opcode does not use must be zero; both
``encode`` and ``decode`` enforce this so round-trips are exact.  All
functions here are pure and safe for concurrent use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

WORD_BYTES = 32

# Bank numbering used in operand descriptors.
BANK_I, BANK_0, BANK_1, BANK_2, BANK_3, BANK_O = range(6)

BANK_NAMES = ("bi", "b0", "b1", "b2", "b3", "bo")

BANK_BYTES = {
    BANK_I: 196608,   # 192KB, input images
    BANK_0: 131072,   # 128KB, feature ping
    BANK_1: 131072,   # 128KB, feature pong
    BANK_2: 262144,   # 256KB, weights
    BANK_3: 262144,   # 256KB, weights
    BANK_O: 32768,    # 32KB, final results
}
BANK_WORDS = {b: n // WORD_BYTES for b, n in BANK_BYTES.items()}

LAYOUT_PIXEL_MAJOR = 0
LAYOUT_INTERLEAVED = 1
LAYOUT_NAMES = ("p", "i")

MAX_PROGRAM_LEN = 65536


class IsaError(ValueError):
    """Malformed instruction, encoding or program file."""


class Opcode:
    """Numeric opcodes.  bn..gap are neural type, jump/sup/end control."""

    BN = 0x01
    RELU = 0x02
    CONV = 0x03
    DWCONV = 0x04
    ADD = 0x05
    MOVE = 0x06
    DSAM = 0x07
    USAM = 0x08
    MAXP = 0x09
    GAP = 0x0A
    JUMP = 0x0B
    SUP = 0x0C
    END = 0x0D


MNEMONICS = {
    Opcode.BN: "bn",
    Opcode.RELU: "relu",
    Opcode.CONV: "conv",
    Opcode.DWCONV: "dwconv",
    Opcode.ADD: "add",
    Opcode.MOVE: "move",
    Opcode.DSAM: "dsam",
    Opcode.USAM: "usam",
    Opcode.MAXP: "maxp",
    Opcode.GAP: "gap",
    Opcode.JUMP: "jump",
    Opcode.SUP: "sup",
    Opcode.END: "end",
}
OPCODES = {name: op for op, name in MNEMONICS.items()}

NEURAL_OPCODES = frozenset(
    (Opcode.BN, Opcode.RELU, Opcode.CONV, Opcode.DWCONV, Opcode.ADD,
     Opcode.MOVE, Opcode.DSAM, Opcode.USAM, Opcode.MAXP, Opcode.GAP)
)
CONTROL_OPCODES = frozenset((Opcode.JUMP, Opcode.SUP, Opcode.END))

# Single-source neural ops sharing the src0/dst shape fields.
_UNARY = frozenset(
    (Opcode.RELU, Opcode.MOVE, Opcode.DSAM, Opcode.USAM, Opcode.MAXP, Opcode.GAP)
)


@dataclass(frozen=True)
class OperandDesc:
    """Location of one operand in tensor memory."""

    bank: int
    word_off: int
    layout: int = LAYOUT_PIXEL_MAJOR

    def check(self) -> None:
        if self.bank not in BANK_WORDS:
            raise IsaError(f"invalid bank {self.bank}")
        if not 0 <= self.word_off < BANK_WORDS[self.bank]:
            raise IsaError(
                f"operand out of bank range: {BANK_NAMES[self.bank]} word {self.word_off}"
            )
        if self.layout not in (LAYOUT_PIXEL_MAJOR, LAYOUT_INTERLEAVED):
            raise IsaError(f"invalid layout {self.layout}")

    @property
    def byte_off(self) -> int:
        return self.word_off * WORD_BYTES

    def text(self) -> str:
        return f"{BANK_NAMES[self.bank]}:{self.word_off}:{LAYOUT_NAMES[self.layout]}"


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction in canonical form (unused fields zero/None)."""

    opcode: int
    bn_en: bool = False
    relu_en: bool = False
    k3: bool = False
    stride: int = 0
    ih: int = 0
    iw: int = 0
    ic: int = 0
    oc: int = 0
    src0: OperandDesc | None = None
    src1: OperandDesc | None = None
    dst: OperandDesc | None = None
    par: OperandDesc | None = None
    jump_target: int = 0

    @property
    def mnemonic(self) -> str:
        return MNEMONICS[self.opcode]


def _uses(ins: Instruction) -> frozenset[str]:
    """Names of the fields an opcode is allowed to carry."""
    op = ins.opcode
    if op == Opcode.CONV:
        used = {"bn_en", "relu_en", "k3", "stride", "ih", "iw", "ic", "oc",
                "src0", "src1", "dst"}
        if ins.bn_en:
            used.add("par")
        return frozenset(used)
    if op == Opcode.DWCONV:
        used = {"bn_en", "relu_en", "stride", "ih", "iw", "ic", "src0", "src1", "dst"}
        if ins.bn_en:
            used.add("par")
        return frozenset(used)
    if op == Opcode.BN:
        return frozenset({"ih", "iw", "ic", "src0", "dst", "par"})
    if op == Opcode.ADD:
        return frozenset({"ih", "iw", "ic", "src0", "src1", "dst"})
    if op in _UNARY:
        return frozenset({"ih", "iw", "ic", "src0", "dst"})
    if op == Opcode.JUMP:
        return frozenset({"jump_target"})
    return frozenset()  # sup, end


_FIELD_RANGES = {
    "ih": (1, 511),
    "iw": (1, 511),
    "ic": (1, 2047),
    "oc": (1, 2047),
    "jump_target": (0, 65535),
}


def check_canonical(ins: Instruction) -> None:
    """Raise IsaError unless ``ins`` is canonical and in range."""
    if ins.opcode not in MNEMONICS:
        raise IsaError(f"illegal opcode {ins.opcode}")
    used = _uses(ins)

    for name in ("bn_en", "relu_en", "k3"):
        if getattr(ins, name) and name not in used:
            raise IsaError(f"{ins.mnemonic}: field {name} must be clear")
    for name in ("stride", "ih", "iw", "ic", "oc", "jump_target"):
        val = getattr(ins, name)
        if name in used:
            if name == "stride":
                if val not in (1, 2):
                    raise IsaError(f"{ins.mnemonic}: stride must be 1 or 2")
            else:
                lo, hi = _FIELD_RANGES[name]
                if not lo <= val <= hi:
                    raise IsaError(f"{ins.mnemonic}: {name}={val} out of range [{lo},{hi}]")
        elif val != 0:
            raise IsaError(f"{ins.mnemonic}: field {name} must be zero")
    for name in ("src0", "src1", "dst", "par"):
        desc = getattr(ins, name)
        if name in used:
            if desc is None:
                raise IsaError(f"{ins.mnemonic}: missing operand {name}")
            desc.check()
        elif desc is not None:
            raise IsaError(f"{ins.mnemonic}: operand {name} must be absent")


def _pack_desc(desc: OperandDesc | None) -> int:
    if desc is None:
        return 0
    return desc.bank | (desc.word_off << 3) | (desc.layout << 16)


def _unpack_desc(bits: int) -> OperandDesc:
    return OperandDesc(bank=bits & 0x7, word_off=(bits >> 3) & 0x1FFF,
                       layout=(bits >> 16) & 0x1)


def encode(ins: Instruction) -> bytes:
    """Encode a canonical instruction into its 16-byte word."""
    check_canonical(ins)
    word = ins.opcode
    if ins.opcode == Opcode.JUMP:
        word |= ins.jump_target << 5
    else:
        word |= (int(ins.bn_en) << 5) | (int(ins.relu_en) << 6) | (int(ins.k3) << 8)
        word |= (ins.stride << 9)
        word |= (ins.ih << 11) | (ins.iw << 20) | (ins.ic << 29) | (ins.oc << 40)
        word |= _pack_desc(ins.src0) << 51
        word |= _pack_desc(ins.src1) << 68
        word |= _pack_desc(ins.dst) << 85
        word |= _pack_desc(ins.par) << 102
    return word.to_bytes(16, "little")


def decode(raw: bytes) -> Instruction:
    """Decode 16 bytes; rejects illegal opcodes and nonzero unused fields."""
    if len(raw) != 16:
        raise IsaError(f"instruction word must be 16 bytes, got {len(raw)}")
    word = int.from_bytes(raw, "little")
    opcode = word & 0x1F
    if opcode not in MNEMONICS:
        raise IsaError(f"illegal opcode {opcode}")
    if word >> 119:
        raise IsaError("reserved bits nonzero")

    if opcode == Opcode.JUMP:
        ins = Instruction(opcode=opcode, jump_target=(word >> 5) & 0xFFFF)
        rest = word & ~((0xFFFF << 5) | 0x1F)
        if rest:
            raise IsaError("jump: reserved bits nonzero")
        check_canonical(ins)
        return ins

    if (word >> 7) & 1:
        raise IsaError("reserved bits nonzero")
    descs = {}
    for name, base in (("src0", 51), ("src1", 68), ("dst", 85), ("par", 102)):
        bits = (word >> base) & 0x1FFFF
        descs[name] = _unpack_desc(bits) if bits else None
        # an all-zero descriptor is BankI word 0 pixel-major; treat it as
        # "present" only when the opcode requires the operand
    ins = Instruction(
        opcode=opcode,
        bn_en=bool((word >> 5) & 1),
        relu_en=bool((word >> 6) & 1),
        k3=bool((word >> 8) & 1),
        stride=(word >> 9) & 0x3,
        ih=(word >> 11) & 0x1FF,
        iw=(word >> 20) & 0x1FF,
        ic=(word >> 29) & 0x7FF,
        oc=(word >> 40) & 0x7FF,
        **descs,
    )
    # materialize required-but-zero operands before the canonical check
    needed = _uses(ins)
    fixes = {}
    for name in ("src0", "src1", "dst", "par"):
        if name in needed and getattr(ins, name) is None:
            fixes[name] = OperandDesc(BANK_I, 0, LAYOUT_PIXEL_MAJOR)
    if fixes:
        ins = replace(ins, **fixes)
    check_canonical(ins)
    return ins


@dataclass
class Program:
    """Ordered instruction list; entry point is PC 0."""

    instructions: list[Instruction] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, idx):
        return self.instructions[idx]

    def __eq__(self, other) -> bool:
        return isinstance(other, Program) and self.instructions == other.instructions

    def to_bytes(self) -> bytes:
        if len(self.instructions) > MAX_PROGRAM_LEN:
            raise IsaError(f"program exceeds {MAX_PROGRAM_LEN} instructions")
        blob = bytearray(b"NCP1")
        blob += struct.pack("<I", len(self.instructions))
        for ins in self.instructions:
            blob += encode(ins)
        return bytes(blob)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Program":
        if raw[:4] != b"NCP1":
            raise IsaError("bad magic, not an NCP1 program file")
        (count,) = struct.unpack_from("<I", raw, 4)
        if count > MAX_PROGRAM_LEN:
            raise IsaError(f"program exceeds {MAX_PROGRAM_LEN} instructions")
        if len(raw) != 8 + 16 * count:
            raise IsaError(f"truncated program file: expected {8 + 16 * count} bytes")
        ins = [decode(raw[8 + 16 * i: 24 + 16 * i]) for i in range(count)]
        return cls(ins)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Program":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    pc: int        # -1 for whole-program findings
    message: str

    def __str__(self) -> str:
        where = f"pc {self.pc}" if self.pc >= 0 else "program"
        return f"{self.severity}: {where}: {self.message}"


def _out_shape(ins: Instruction) -> tuple[int, int, int]:
    """(oc, oh, ow) written by a neural instruction."""
    op = ins.opcode
    if op == Opcode.CONV:
        s = ins.stride
        return ins.oc, -(-ins.ih // s), -(-ins.iw // s)
    if op == Opcode.DWCONV:
        s = ins.stride
        return ins.ic, -(-ins.ih // s), -(-ins.iw // s)
    if op in (Opcode.DSAM, Opcode.MAXP):
        return ins.ic, -(-ins.ih // 2), -(-ins.iw // 2)
    if op == Opcode.USAM:
        return ins.ic, ins.ih * 2, ins.iw * 2
    if op == Opcode.GAP:
        return ins.ic, 1, 1
    return ins.ic, ins.ih, ins.iw  # bn, relu, add, move


def operand_extents(ins: Instruction) -> list[tuple[str, OperandDesc, int]]:
    """(name, descriptor, byte length) for every operand an instruction touches."""
    if ins.opcode in CONTROL_OPCODES:
        return []
    in_bytes = ins.ih * ins.iw * ins.ic
    oc, oh, ow = _out_shape(ins)
    out_bytes = oc * oh * ow
    ext = [("src0", ins.src0, in_bytes)]
    if ins.opcode == Opcode.CONV:
        k = 3 if ins.k3 else 1
        ext.append(("src1", ins.src1, ins.oc * ins.ic * k * k))
        if ins.bn_en:
            ext.append(("par", ins.par, 8 * ins.oc))
    elif ins.opcode == Opcode.DWCONV:
        ext.append(("src1", ins.src1, ins.ic * 9))
        if ins.bn_en:
            ext.append(("par", ins.par, 8 * ins.ic))
    elif ins.opcode == Opcode.BN:
        ext.append(("par", ins.par, 8 * ins.ic))
    elif ins.opcode == Opcode.ADD:
        ext.append(("src1", ins.src1, in_bytes))
    ext.append(("dst", ins.dst, out_bytes))
    return ext


def validate(program: Program) -> list[Diagnostic]:
    """Static checks: control flow, bank usage and operand footprints."""
    diags: list[Diagnostic] = []
    n = len(program)
    if n > MAX_PROGRAM_LEN:
        diags.append(Diagnostic("error", -1, f"program exceeds {MAX_PROGRAM_LEN} instructions"))

    for pc, ins in enumerate(program):
        try:
            check_canonical(ins)
        except IsaError as exc:
            diags.append(Diagnostic("error", pc, str(exc)))
            continue
        if ins.opcode == Opcode.JUMP and not 0 <= ins.jump_target < n:
            diags.append(Diagnostic("error", pc, f"jump target {ins.jump_target} out of range"))
        for name, desc, nbytes in operand_extents(ins):
            if desc.byte_off + nbytes > BANK_BYTES[desc.bank]:
                diags.append(Diagnostic(
                    "error", pc,
                    f"bank overrun: {name} needs {nbytes} bytes at "
                    f"{BANK_NAMES[desc.bank]}:{desc.word_off}"))
            if name == "dst":
                if desc.bank == BANK_I:
                    diags.append(Diagnostic("error", pc, "write to input bank bi"))
                elif desc.bank in (BANK_2, BANK_3):
                    diags.append(Diagnostic("warning", pc, "write to weight bank"))

    # reachability from PC 0
    reachable = set()
    terminated = False
    stack = [0] if n else []
    while stack:
        pc = stack.pop()
        if pc in reachable:
            continue
        if pc >= n:
            diags.append(Diagnostic("error", -1, "control flow falls off program end"))
            continue
        reachable.add(pc)
        ins = program[pc]
        if ins.opcode in (Opcode.END, Opcode.SUP):
            terminated = True
        elif ins.opcode == Opcode.JUMP:
            if 0 <= ins.jump_target < n:
                stack.append(ins.jump_target)
        else:
            stack.append(pc + 1)
    if n and not terminated:
        diags.append(Diagnostic("warning", -1, "no reachable end/sup"))
    for pc in range(n):
        if pc not in reachable:
            diags.append(Diagnostic("warning", pc, "unreachable instruction"))
    return diags
