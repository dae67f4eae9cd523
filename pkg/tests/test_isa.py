"""Encoder/decoder: golden words, reference packer, round trips, errors."""

import numpy as np
import pytest

from helpers import random_instruction

from ncpkit.isa import (
    BANK_O,
    Diagnostic,
    Instruction,
    IsaError,
    Opcode,
    OperandDesc,
    Program,
    decode,
    encode,
    validate,
)

# field name -> (lsb, width); reference packer kept separate from the
# production shift layout on purpose
_REF_FIELDS = {
    "bn_en": (5, 1),
    "relu_en": (6, 1),
    "k3": (8, 1),
    "stride": (9, 2),
    "ih": (11, 9),
    "iw": (20, 9),
    "ic": (29, 11),
    "oc": (40, 11),
}
_REF_DESCS = {"src0": 51, "src1": 68, "dst": 85, "par": 102}


def reference_pack(ins: Instruction) -> bytes:
    word = ins.opcode
    if ins.opcode == Opcode.JUMP:
        word += ins.jump_target * 32
    else:
        for name, (lsb, width) in _REF_FIELDS.items():
            val = int(getattr(ins, name))
            assert val < 2 ** width
            word += val * 2 ** lsb
        for name, base in _REF_DESCS.items():
            desc = getattr(ins, name)
            if desc is not None:
                word += (desc.bank + desc.word_off * 8 + desc.layout * 65536) \
                    * 2 ** base
    return word.to_bytes(16, "little")


def test_end_golden_bytes():
    assert encode(Instruction(opcode=Opcode.END)) == bytes([0x0D] + [0] * 15)


def test_sup_golden_bytes():
    assert encode(Instruction(opcode=Opcode.SUP)) == bytes([0x0C] + [0] * 15)


def test_jump_golden_bits():
    raw = encode(Instruction(opcode=Opcode.JUMP, jump_target=5))
    word = int.from_bytes(raw, "little")
    assert word & 0x1F == 0x0B
    assert (word >> 5) & 0xFFFF == 5
    assert word >> 21 == 0


@pytest.mark.parametrize("seed", range(8))
def test_encode_matches_reference_packer(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        ins = random_instruction(rng)
        assert encode(ins) == reference_pack(ins)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1234)
    for _ in range(2000):
        ins = random_instruction(rng)
        assert decode(encode(ins)) == ins


def test_decode_zero_word_is_illegal():
    with pytest.raises(IsaError, match="illegal opcode 0"):
        decode(bytes(16))


def test_decode_rejects_reserved_bits():
    raw = bytearray(encode(Instruction(opcode=Opcode.END)))
    raw[15] |= 0x80  # bit 127
    with pytest.raises(IsaError, match="reserved"):
        decode(bytes(raw))


def test_decode_rejects_unused_fields():
    word = Opcode.END | (5 << 11)  # ih on an end instruction
    with pytest.raises(IsaError, match="ih must be zero"):
        decode(word.to_bytes(16, "little"))


def test_decode_rejects_bank_overflowing_offset():
    # BankO has 1024 words; word_off 2000 is out of range
    word = Opcode.RELU | (1 << 11) | (1 << 20) | (1 << 29)
    desc = BANK_O | (2000 << 3)
    word |= desc << 51
    word |= (1 << 85)  # dst = b0:0
    with pytest.raises(IsaError, match="out of bank range"):
        decode(word.to_bytes(16, "little"))


def test_encode_rejects_out_of_range_fields():
    with pytest.raises(IsaError):
        encode(Instruction(opcode=Opcode.JUMP, jump_target=70000))
    with pytest.raises(IsaError, match="stride"):
        encode(Instruction(opcode=Opcode.CONV, stride=3, ih=1, iw=1, ic=1, oc=1,
                           src0=OperandDesc(0, 0), src1=OperandDesc(3, 0),
                           dst=OperandDesc(1, 0)))


def test_encode_rejects_noncanonical():
    # oc is unused by dwconv and must stay zero
    with pytest.raises(IsaError, match="oc must be zero"):
        encode(Instruction(opcode=Opcode.DWCONV, stride=1, ih=4, iw=4, ic=4,
                           oc=4, src0=OperandDesc(1, 0), src1=OperandDesc(3, 0),
                           dst=OperandDesc(2, 0)))
    # par without bn_en
    with pytest.raises(IsaError, match="par must be absent"):
        encode(Instruction(opcode=Opcode.CONV, stride=1, ih=4, iw=4, ic=4, oc=4,
                           src0=OperandDesc(1, 0), src1=OperandDesc(3, 0),
                           dst=OperandDesc(2, 0), par=OperandDesc(3, 1)))


def test_program_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    prog = Program([random_instruction(rng) for _ in range(64)])
    path = tmp_path / "p.ncp1"
    prog.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"NCP1"
    assert len(raw) == 8 + 16 * 64
    assert Program.load(path) == prog


def test_program_file_bad_magic():
    with pytest.raises(IsaError, match="magic"):
        Program.from_bytes(b"XXXX" + bytes(20))


def test_validate_clean_end():
    assert validate(Program([Instruction(opcode=Opcode.END)])) == []


def test_validate_jump_loop_warns_no_terminator():
    diags = validate(Program([Instruction(opcode=Opcode.JUMP, jump_target=0)]))
    assert any(d.severity == "warning" and "no reachable end/sup" in d.message
               for d in diags)


def test_validate_unreachable():
    prog = Program([Instruction(opcode=Opcode.END), Instruction(opcode=Opcode.SUP)])
    diags = validate(prog)
    assert any("unreachable" in d.message and d.pc == 1 for d in diags)


def test_validate_jump_out_of_range():
    prog = Program([Instruction(opcode=Opcode.JUMP, jump_target=9),
                    Instruction(opcode=Opcode.END)])
    assert any(d.severity == "error" and "out of range" in d.message
               for d in validate(prog))


def test_validate_bank_overrun_footprint():
    # conv reading near the end of BankO with a footprint > 32 bytes
    ins = Instruction(opcode=Opcode.CONV, stride=1, ih=4, iw=4, ic=4, oc=4,
                      k3=False,
                      src0=OperandDesc(5, 1023), src1=OperandDesc(3, 0),
                      dst=OperandDesc(1, 0))
    diags = validate(Program([ins, Instruction(opcode=Opcode.END)]))
    assert any(d.severity == "error" and "bank overrun" in d.message
               for d in diags)


def test_validate_write_to_input_bank():
    ins = Instruction(opcode=Opcode.RELU, ih=2, iw=2, ic=2,
                      src0=OperandDesc(1, 0), dst=OperandDesc(0, 0))
    diags = validate(Program([ins, Instruction(opcode=Opcode.END)]))
    assert any("write to input bank" in d.message for d in diags)


def test_diagnostic_str():
    d = Diagnostic("error", 3, "boom")
    assert "pc 3" in str(d) and "boom" in str(d)
