"""Assembler/disassembler: grammar, labels, canonical round trips."""

import numpy as np
import pytest

from helpers import random_instruction

from ncpkit.asm import AsmError, assemble, disassemble
from ncpkit.isa import Instruction, Opcode, OperandDesc, Program, decode

CONV_LINE = ("conv dst=b1:0:p src=bi:0:p w=b3:0:i par=b3:4000:i "
             "ih=256 iw=256 ic=3 oc=8 k=3 s=2 bn relu")


def test_single_end():
    prog = assemble("end")
    assert len(prog) == 1
    assert prog[0] == Instruction(opcode=Opcode.END)


def test_disassemble_end():
    assert disassemble(Program([Instruction(opcode=Opcode.END)])) == "end\n"


def test_conv_line_fields():
    prog = assemble(CONV_LINE)
    ins = prog[0]
    assert ins.opcode == Opcode.CONV
    assert ins.bn_en and ins.relu_en and ins.k3
    assert ins.stride == 2
    assert (ins.ih, ins.iw, ins.ic, ins.oc) == (256, 256, 3, 8)
    assert ins.src0 == OperandDesc(0, 0, 0)
    assert ins.src1 == OperandDesc(4, 0, 1)
    assert ins.dst == OperandDesc(2, 0, 0)
    assert ins.par == OperandDesc(4, 4000, 1)


def test_conv_line_matches_hand_packed_word():
    word = (Opcode.CONV | 1 << 5 | 1 << 6 | 1 << 8 | 2 << 9
            | 256 << 11 | 256 << 20 | 3 << 29 | 8 << 40)
    word |= 0 << 51                                   # src0 bi:0:p
    word |= (4 | 1 << 16) << 68                       # w  b3:0:i
    word |= 2 << 85                                   # dst b1:0:p
    word |= (4 | 4000 << 3 | 1 << 16) << 102          # par b3:4000:i
    assert assemble(CONV_LINE)[0] == decode(word.to_bytes(16, "little"))


def test_conv_canonical_text_golden():
    prog = assemble(CONV_LINE)
    assert disassemble(prog) == CONV_LINE + "\n"


def test_fields_accepted_in_any_order():
    shuffled = ("conv relu bn s=2 k=3 oc=8 ic=3 iw=256 ih=256 "
                "par=b3:4000:i w=b3:0:i src=bi:0:p dst=b1:0:p")
    assert assemble(shuffled) == assemble(CONV_LINE)


def test_labels_resolve():
    prog = assemble("loop:\njump @loop\nend")
    assert prog[0] == Instruction(opcode=Opcode.JUMP, jump_target=0)
    prog = assemble("jump @done\nsup\ndone: end")
    assert prog[0].jump_target == 2
    assert prog[2].opcode == Opcode.END


def test_label_at_pc2_example():
    text = "sup\nsup\nloop: sup\njump @loop\n"
    prog = assemble(text)
    assert prog[3] == Instruction(opcode=Opcode.JUMP, jump_target=2)


def test_comments_and_blank_lines():
    prog = assemble("# header\n\nend  # trailing\n")
    assert len(prog) == 1


def test_numeric_jump():
    assert assemble("jump 5")[0].jump_target == 5


def test_error_reports_line_number():
    with pytest.raises(AsmError, match="line 3"):
        assemble("end\nend\nbogus\n")


def test_unknown_mnemonic():
    with pytest.raises(AsmError, match="unknown mnemonic"):
        assemble("frobnicate")


def test_undefined_label():
    with pytest.raises(AsmError, match="undefined label"):
        assemble("jump @nowhere\nend")


def test_duplicate_label():
    with pytest.raises(AsmError, match="duplicate label"):
        assemble("a:\na:\nend")


def test_missing_required_field():
    with pytest.raises(AsmError, match="requires ih"):
        assemble("relu dst=b0:0:p src=b1:0:p iw=4 ic=4")


def test_par_requires_bn_flag():
    with pytest.raises(AsmError, match="par="):
        assemble("conv dst=b1:0:p src=bi:0:p w=b3:0:i par=b3:1:p "
                 "ih=4 iw=4 ic=1 oc=1 k=1 s=1")


def test_range_violation_surfaces_as_asm_error():
    with pytest.raises(AsmError, match="out of range"):
        assemble("relu dst=b0:0:p src=b1:0:p ih=600 iw=4 ic=4")


def test_bad_operand_syntax():
    with pytest.raises(AsmError, match="bank:word_off:layout"):
        assemble("relu dst=b0:0 src=b1:0:p ih=4 iw=4 ic=4")
    with pytest.raises(AsmError, match="unknown bank"):
        assemble("relu dst=b9:0:p src=b1:0:p ih=4 iw=4 ic=4")


def test_round_trip_random_programs():
    rng = np.random.default_rng(99)
    for _ in range(20):
        prog = Program([random_instruction(rng) for _ in range(100)])
        text = disassemble(prog)
        again = assemble(text)
        assert again == prog
        assert disassemble(again) == text  # byte-stable after one pass
