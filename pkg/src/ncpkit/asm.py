"""Textual assembly for the NCP instruction set.

Grammar, one instruction per line:

    label:                       # labels name the next instruction's PC
    conv dst=b1:0:p src=bi:0:p w=b3:0:i par=b3:4000:i ih=256 iw=256 \
         ic=3 oc=8 k=3 s=2 bn relu
    jump @label                  # or a literal PC: jump 5
    end                          # '#' starts a comment

Operands are ``name=bank:word_off:layout`` with banks bi,b0,b1,b2,b3,bo
and layouts p (pixel-major) / i (interleaved).  ``disassemble`` emits the
canonical spelling (lowercase mnemonics, fixed field order, numeric jump
targets), so assemble(disassemble(p)) == p for any valid program.
"""

from __future__ import annotations

import re

from .isa import (
    BANK_NAMES,
    Instruction,
    LAYOUT_NAMES,
    MNEMONICS,
    OPCODES,
    Opcode,
    OperandDesc,
    Program,
)

_BANKS = {name: idx for idx, name in enumerate(BANK_NAMES)}
_LAYOUTS = {name: idx for idx, name in enumerate(LAYOUT_NAMES)}
_LABEL_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

# key=value fields accepted per mnemonic, in canonical output order
_OPERAND_KEYS = {
    "bn": ("dst", "src", "par"),
    "relu": ("dst", "src"),
    "conv": ("dst", "src", "w", "par"),
    "dwconv": ("dst", "src", "w", "par"),
    "add": ("dst", "src0", "src1"),
    "move": ("dst", "src"),
    "dsam": ("dst", "src"),
    "usam": ("dst", "src"),
    "maxp": ("dst", "src"),
    "gap": ("dst", "src"),
}
_SHAPE_KEYS = {
    "bn": ("ih", "iw", "ic"),
    "relu": ("ih", "iw", "ic"),
    "conv": ("ih", "iw", "ic", "oc", "k", "s"),
    "dwconv": ("ih", "iw", "ic", "s"),
    "add": ("ih", "iw", "ic"),
    "move": ("ih", "iw", "ic"),
    "dsam": ("ih", "iw", "ic"),
    "usam": ("ih", "iw", "ic"),
    "maxp": ("ih", "iw", "ic"),
    "gap": ("ih", "iw", "ic"),
}
_FLAG_MNEMONICS = ("conv", "dwconv")

# maps assembler operand names onto Instruction fields
_FIELD_OF = {"src": "src0", "w": "src1", "src0": "src0", "src1": "src1",
             "dst": "dst", "par": "par"}


class AsmError(ValueError):
    """Assembly syntax or semantic error, carries a source line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _parse_operand(line_no: int, text: str) -> OperandDesc:
    parts = text.split(":")
    if len(parts) != 3:
        raise AsmError(line_no, f"operand must be bank:word_off:layout, got '{text}'")
    bank, off, layout = parts
    if bank not in _BANKS:
        raise AsmError(line_no, f"unknown bank '{bank}'")
    if layout not in _LAYOUTS:
        raise AsmError(line_no, f"unknown layout '{layout}'")
    try:
        word_off = int(off, 0)
    except ValueError:
        raise AsmError(line_no, f"bad word offset '{off}'") from None
    return OperandDesc(_BANKS[bank], word_off, _LAYOUTS[layout])


def _parse_int(line_no: int, key: str, text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise AsmError(line_no, f"bad integer for {key}: '{text}'") from None


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def assemble(text: str) -> Program:
    """Assemble source text into a Program; labels resolve to PCs."""
    labels: dict[str, int] = {}
    pending: list[tuple[int, str, list[str]]] = []  # (line_no, mnemonic, tokens)

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        while line:
            head = line.split(None, 1)[0]
            if head.endswith(":"):
                name = head[:-1]
                if not _LABEL_RE.match(name):
                    raise AsmError(line_no, f"bad label '{name}'")
                if name in labels:
                    raise AsmError(line_no, f"duplicate label '{name}'")
                labels[name] = len(pending)
                line = line[len(head):].strip()
                continue
            tokens = line.split()
            pending.append((line_no, tokens[0], tokens[1:]))
            line = ""

    instructions = []
    for line_no, mnemonic, tokens in pending:
        instructions.append(_build(line_no, mnemonic, tokens, labels))
    return Program(instructions)


def _build(line_no: int, mnemonic: str, tokens: list[str],
           labels: dict[str, int]) -> Instruction:
    if mnemonic not in OPCODES:
        raise AsmError(line_no, f"unknown mnemonic '{mnemonic}'")
    opcode = OPCODES[mnemonic]

    if opcode in (Opcode.SUP, Opcode.END):
        if tokens:
            raise AsmError(line_no, f"{mnemonic} takes no operands")
        return Instruction(opcode=opcode)

    if opcode == Opcode.JUMP:
        if len(tokens) != 1:
            raise AsmError(line_no, "jump takes exactly one target")
        tok = tokens[0]
        if tok.startswith("@"):
            name = tok[1:]
            if name not in labels:
                raise AsmError(line_no, f"undefined label '{name}'")
            target = labels[name]
        else:
            target = _parse_int(line_no, "target", tok)
        if not 0 <= target <= 0xFFFF:
            raise AsmError(line_no, f"jump target {target} out of range")
        return Instruction(opcode=opcode, jump_target=target)

    operand_keys = _OPERAND_KEYS[mnemonic]
    shape_keys = _SHAPE_KEYS[mnemonic]
    fields: dict[str, object] = {"opcode": opcode}
    ints: dict[str, int] = {}
    flags = {"bn": False, "relu": False}
    seen = set()
    for tok in tokens:
        if "=" in tok:
            key, val = tok.split("=", 1)
            if key in seen:
                raise AsmError(line_no, f"duplicate field '{key}'")
            seen.add(key)
            if key in operand_keys:
                fields[_FIELD_OF[key]] = _parse_operand(line_no, val)
            elif key in shape_keys:
                ints[key] = _parse_int(line_no, key, val)
            else:
                raise AsmError(line_no, f"{mnemonic} does not take '{key}'")
        elif tok in ("bn", "relu") and mnemonic in _FLAG_MNEMONICS:
            flags[tok] = True
        else:
            raise AsmError(line_no, f"unexpected token '{tok}'")

    for key in shape_keys:
        if key not in ints:
            raise AsmError(line_no, f"{mnemonic} requires {key}=")
    for key in ("ih", "iw", "ic"):
        fields[key] = ints[key]
    if mnemonic == "conv":
        fields["oc"] = ints["oc"]
        if ints["k"] not in (1, 3):
            raise AsmError(line_no, "k must be 1 or 3")
        fields["k3"] = ints["k"] == 3
    if mnemonic in ("conv", "dwconv"):
        fields["stride"] = ints["s"]
        fields["bn_en"] = flags["bn"]
        fields["relu_en"] = flags["relu"]
        if flags["bn"] != ("par" in seen):
            raise AsmError(line_no, "par= must be given exactly when bn is set")

    for key in operand_keys:
        want = _FIELD_OF[key]
        if want not in fields and not (key == "par" and mnemonic in _FLAG_MNEMONICS):
            raise AsmError(line_no, f"{mnemonic} requires {key}=")

    try:
        ins = Instruction(**fields)  # type: ignore[arg-type]
        from .isa import check_canonical

        check_canonical(ins)
    except ValueError as exc:
        raise AsmError(line_no, str(exc)) from None
    return ins


def _format(ins: Instruction) -> str:
    m = ins.mnemonic
    if ins.opcode in (Opcode.SUP, Opcode.END):
        return m
    if ins.opcode == Opcode.JUMP:
        return f"jump {ins.jump_target}"

    parts = [m]
    for key in _OPERAND_KEYS[m]:
        desc = getattr(ins, _FIELD_OF[key])
        if desc is not None:
            parts.append(f"{key}={desc.text()}")
    parts += [f"ih={ins.ih}", f"iw={ins.iw}", f"ic={ins.ic}"]
    if ins.opcode == Opcode.CONV:
        parts.append(f"oc={ins.oc}")
        parts.append(f"k={3 if ins.k3 else 1}")
    if ins.opcode in (Opcode.CONV, Opcode.DWCONV):
        parts.append(f"s={ins.stride}")
        if ins.bn_en:
            parts.append("bn")
        if ins.relu_en:
            parts.append("relu")
    return " ".join(parts)


def disassemble(program: Program) -> str:
    """Canonical text for a program, one line per instruction."""
    return "".join(_format(ins) + "\n" for ins in program)
