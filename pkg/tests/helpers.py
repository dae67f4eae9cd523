"""Shared generators for the test suite: random instructions and graphs."""

from __future__ import annotations

import numpy as np

from ncpkit.blocks import BackboneConfig, StageSpec, StemOp
from ncpkit.ir import TensorShape
from ncpkit.isa import BANK_WORDS, Instruction, Opcode, OperandDesc


def random_operand(rng) -> OperandDesc:
    bank = int(rng.integers(0, 6))
    return OperandDesc(bank, int(rng.integers(0, BANK_WORDS[bank])),
                       int(rng.integers(0, 2)))


def random_instruction(rng) -> Instruction:
    op = int(rng.choice((
        Opcode.BN, Opcode.RELU, Opcode.CONV, Opcode.DWCONV, Opcode.ADD,
        Opcode.MOVE, Opcode.DSAM, Opcode.USAM, Opcode.MAXP, Opcode.GAP,
        Opcode.JUMP, Opcode.SUP, Opcode.END)))
    if op in (Opcode.SUP, Opcode.END):
        return Instruction(opcode=op)
    if op == Opcode.JUMP:
        return Instruction(opcode=op, jump_target=int(rng.integers(0, 65536)))
    shape = dict(ih=int(rng.integers(1, 512)), iw=int(rng.integers(1, 512)),
                 ic=int(rng.integers(1, 1025)))
    fields = dict(opcode=op, src0=random_operand(rng), dst=random_operand(rng),
                  **shape)
    if op == Opcode.CONV:
        fields.update(oc=int(rng.integers(1, 1025)),
                      k3=bool(rng.integers(0, 2)),
                      stride=int(rng.integers(1, 3)),
                      bn_en=bool(rng.integers(0, 2)),
                      relu_en=bool(rng.integers(0, 2)),
                      src1=random_operand(rng))
        if fields["bn_en"]:
            fields["par"] = random_operand(rng)
    elif op == Opcode.DWCONV:
        fields.update(stride=int(rng.integers(1, 3)),
                      bn_en=bool(rng.integers(0, 2)),
                      relu_en=bool(rng.integers(0, 2)),
                      src1=random_operand(rng))
        if fields["bn_en"]:
            fields["par"] = random_operand(rng)
    elif op == Opcode.BN:
        fields["par"] = random_operand(rng)
    elif op == Opcode.ADD:
        fields["src1"] = random_operand(rng)
    return Instruction(**fields)


def tiny_config(**overrides) -> BackboneConfig:
    base = dict(
        input=TensorShape(16, 16, 3),
        stem=(StemOp("conv3x3", c=8, s=2),),
        stages=(StageSpec("lb", n=2, c=16, s=2),),
        head_c=16,
        dlb_merge="add",
    )
    base.update(overrides)
    return BackboneConfig(**base)


def random_config(seed: int) -> BackboneConfig:
    """Small random backbone configs covering every opcode across seeds.

    Even seeds: irregular shapes, LB stages and assorted stem ops
    (padding and pooling coverage).  Odd seeds: power-of-two shapes with
    DLB stages, alternating add and concat merges.
    """
    rng = np.random.default_rng([seed, 0xC0F])
    if seed % 2 == 0:
        h = int(rng.integers(9, 22))
        w = int(rng.integers(9, 22))
        c_in = int(rng.integers(1, 5))
        stem = [StemOp("conv3x3", c=int(rng.choice((4, 8, 12))),
                       s=int(rng.integers(1, 3)))]
        pool = ["dwconv3x3", "maxp", "bn", "dsam", "relu", "usam", "conv1x1"]
        picks = rng.choice(len(pool), size=int(rng.integers(1, 4)), replace=False)
        did_shrink = False
        for idx in sorted(int(i) for i in picks):
            kind = pool[idx]
            if kind == "usam" and not did_shrink:
                continue  # keep spatial sizes small
            if kind in ("maxp", "dsam"):
                did_shrink = True
            if kind == "conv1x1":
                stem.append(StemOp(kind, c=int(rng.choice((4, 8))), s=1))
            elif kind == "dwconv3x3":
                stem.append(StemOp(kind, s=int(rng.integers(1, 3))))
            else:
                stem.append(StemOp(kind))
        stages = tuple(
            StageSpec("lb", n=int(rng.integers(1, 3)),
                      c=int(rng.choice((8, 12, 16))), s=int(rng.integers(1, 3)))
            for _ in range(int(rng.integers(0, 3))))
        head_c = int(rng.choice((8, 16, 24)))
        return BackboneConfig(input=TensorShape(h, w, c_in), stem=tuple(stem),
                              stages=stages, head_c=head_c)

    h = w = int(rng.choice((8, 16)))
    c_in = int(rng.choice((2, 4)))
    merge = "concat" if seed % 4 == 1 else "add"
    c0 = int(rng.choice((8, 16)))
    stages = [StageSpec("lb", n=1, c=c0, s=int(rng.integers(1, 3)))]
    stages.append(StageSpec("dlb", n=int(rng.integers(1, 3)), c=c0,
                            s=1 if merge == "add" else int(rng.integers(1, 3))))
    return BackboneConfig(
        input=TensorShape(h, w, c_in),
        stem=(StemOp("conv3x3", c=c0, s=2),),
        stages=tuple(stages),
        head_c=int(rng.choice((8, 16))),
        dlb_merge=merge,
    )
