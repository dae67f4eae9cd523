"""End-to-end execution helpers: compile a graph, run it, check the oracle.

This is the machinery behind ``ncpkit check`` and the equivalence test
suite: the compiled program runs on the simulator while the same graph
runs through the scalar reference interpreter, and the output bytes must
match exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle, sim
from .blocks import BackboneConfig, random_model
from .compiler import CompileResult, compile_graph
from .ir import QuantizedGraph, TensorShape
from .isa import Opcode, Program, Instruction
from .oracle import CompareResult, RefTensor
from .sim import ArchParams, DEFAULT_ARCH, EnergyCoeffs, TmState, TraceStats


def random_input(seed: int, shape: TensorShape) -> RefTensor:
    rng = np.random.default_rng([seed, 0x1A9])
    data = rng.integers(-128, 128, size=(shape.c, shape.h, shape.w),
                        dtype=np.int64).astype(np.int8)
    return RefTensor(shape, data)


def load_input(tm: TmState, result: CompileResult, inp: RefTensor) -> None:
    graph = result.fused
    pl = result.plan.of(graph.input_id)
    from . import layouts

    tm.write(pl.desc.bank, pl.desc.byte_off,
             layouts.encode(inp.data, pl.desc.layout))


@dataclass
class RunOutcome:
    stats: TraceStats
    status: str
    out_bytes: bytes
    out_layout: int
    ref: RefTensor | None = None
    compare: CompareResult | None = None

    @property
    def bit_exact(self) -> bool:
        return self.compare is not None and self.compare.equal


def execute(result: CompileResult, inp: RefTensor,
            arch: ArchParams = DEFAULT_ARCH,
            coeffs: EnergyCoeffs | None = None,
            program: Program | None = None) -> RunOutcome:
    """Run a compiled graph on the simulator and collect its output bytes."""
    graph = result.fused
    if len(graph.output_ids) != 1:
        raise ValueError("harness expects a single graph output")
    tm = TmState()
    tm.load_weight_image(result.weight_image)
    load_input(tm, result, inp)
    mc, stats = sim.run(program or result.program, tm, arch, coeffs)
    out_pl = result.plan.of(graph.output_ids[0])
    raw = tm.read(out_pl.desc.bank, out_pl.desc.byte_off, out_pl.byte_len)
    return RunOutcome(stats=stats, status=mc.status, out_bytes=raw.tobytes(),
                      out_layout=out_pl.desc.layout)


def check_graph(graph: QuantizedGraph, inp: RefTensor,
                arch: ArchParams = DEFAULT_ARCH,
                coeffs: EnergyCoeffs | None = None,
                cover_control: bool = False) -> RunOutcome:
    """Compile, simulate and compare against the reference interpreter.

    With ``cover_control`` the program is wrapped in a jump prolog and a
    trailing sup so the control opcodes get exercised without changing
    the result: [jump 2, sup, <body...>, end] -- the body's end still
    terminates the run, the inserted sup is skipped over.
    """
    result = compile_graph(graph)
    program = result.program
    if cover_control:
        body = []
        for ins in result.program:
            if ins.opcode == Opcode.JUMP:
                body.append(Instruction(opcode=Opcode.JUMP,
                                        jump_target=ins.jump_target + 2))
            else:
                body.append(ins)
        program = Program(
            [Instruction(opcode=Opcode.JUMP, jump_target=2),
             Instruction(opcode=Opcode.SUP)] + body)
    outcome = execute(result, inp, arch, coeffs, program=program)
    outcome.ref = oracle.ref_run(graph, inp)
    outcome.compare = oracle.compare(outcome.ref, outcome.out_bytes,
                                     outcome.out_layout)
    return outcome


def sweep(cfg: BackboneConfig, seeds: range,
          cover_control: bool = False) -> list[tuple[int, RunOutcome]]:
    """Simulator-vs-oracle sweep over random weights and inputs."""
    results = []
    for seed in seeds:
        graph = random_model(seed, cfg)
        inp = random_input(seed, cfg.input)
        results.append((seed, check_graph(graph, inp,
                                          cover_control=cover_control)))
    return results
