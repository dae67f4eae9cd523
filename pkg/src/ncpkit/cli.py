"""Command line front end.

    ncpkit compile model.json -o prog.ncp1 -w weights.ncpw [--seed N] [--report]
    ncpkit asm prog.s -o prog.ncp1
    ncpkit disasm prog.ncp1 [-o prog.s]
    ncpkit run prog.ncp1 weights.ncpw image.ppm [--trace] [--stats] [--out raw]
    ncpkit check model.json --seeds N
    ncpkit bench model.json --bus sdio|spi [--seed N]

Exit status 0 on success, 1 with a diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import sys

from . import asm as asmmod
from . import harness, host, layouts, sim
from .blocks import load_config, load_model, random_model
from .compiler import (
    CompileError,
    WeightImage,
    compile_graph,
    memory_report_text,
)
from .ir import IrError
from .isa import BANK_I, BANK_O, IsaError, Opcode, Program
from .sim import SimError, TmState


class CliError(Exception):
    pass


def _cmd_init(args) -> int:
    from .blocks import default_backbone_config, save_config, scale_widths

    cfg = default_backbone_config()
    if args.width != 1.0:
        cfg = scale_widths(cfg, args.width)
    save_config(cfg, args.output)
    print(f"wrote backbone config -> {args.output}")
    return 0


def _cmd_compile(args) -> int:
    graph = load_model(args.graph, weights_path=args.weights_in, seed=args.seed)
    result = compile_graph(graph)
    result.program.save(args.output)
    result.weight_image.save(args.weights)
    print(f"compiled {len(result.program)} instructions -> {args.output}")
    print(f"weight image -> {args.weights}")
    if args.report:
        print(memory_report_text(result.plan), end="")
    return 0


def _cmd_asm(args) -> int:
    with open(args.source) as fh:
        program = asmmod.assemble(fh.read())
    program.save(args.output)
    print(f"assembled {len(program)} instructions -> {args.output}")
    return 0


def _cmd_disasm(args) -> int:
    program = Program.load(args.program)
    text = asmmod.disassemble(program)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return 0


def _find_input_slot(program: Program):
    for ins in program:
        if ins.src0 is not None and ins.src0.bank == BANK_I:
            return ins
    raise CliError("program never reads the input bank")


def _cmd_run(args) -> int:
    program = Program.load(args.program)
    image = host.read_ppm(args.image)
    tensor = host.preprocess(image, mean=args.mean, scale=args.scale)

    slot = _find_input_slot(program)
    want = (slot.ic, slot.ih, slot.iw)
    got = (tensor.shape.c, tensor.shape.h, tensor.shape.w)
    if want != got:
        raise CliError(f"program expects input c,h,w={want}, image is {got}")

    tm = TmState()
    tm.load_weight_image(WeightImage.load(args.weights))
    tm.write(slot.src0.bank, slot.src0.byte_off,
             layouts.encode(tensor.data, slot.src0.layout))

    mc, stats = sim.run(program, tm)
    if args.trace:
        print(stats.trace_text(), end="")
    if args.stats:
        print(stats.summary_text(), end="")
    print(f"status: {mc.status}")

    outputs = [ins for ins in program
               if ins.dst is not None and ins.dst.bank == BANK_O]
    chunks = []
    for ins in outputs:
        if ins.opcode == Opcode.GAP:
            c, h, w = ins.ic, 1, 1
        else:
            c, h, w = ins.ic, ins.ih, ins.iw
        raw = tm.read(BANK_O, ins.dst.byte_off, c * h * w)
        chunks.append(raw)
        head = ", ".join(str(int(v)) for v in raw[:16])
        more = " ..." if raw.size > 16 else ""
        print(f"output @bo:{ins.dst.word_off} ({c}x{h}x{w}): [{head}{more}]")
    if args.out:
        with open(args.out, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk.tobytes())
        print(f"raw output -> {args.out}")
    return 0


def _cmd_check(args) -> int:
    cfg = load_config(args.graph)
    ok = 0
    results = harness.sweep(cfg, range(args.seeds))
    for seed, outcome in results:
        if outcome.bit_exact:
            ok += 1
        else:
            print(f"seed {seed}: MISMATCH ({outcome.compare})")
    print(f"{ok}/{args.seeds} bit-exact")
    return 0 if ok == args.seeds else 1


def _cmd_bench(args) -> int:
    cfg = load_config(args.graph)
    graph = random_model(args.seed, cfg)
    result = compile_graph(graph)
    inp = harness.random_input(args.seed, cfg.input)
    outcome = harness.execute(result, inp)
    bus = host.SDIO if args.bus == "sdio" else host.SPI
    profile = host.SystemProfile(stats=outcome.stats, bus=bus, image=cfg.input)
    print(outcome.stats.summary_text(), end="")
    print(host.system_report_text(host.system_report(profile)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncpkit",
                                description="NCP compiler/assembler/simulator")
    sub = p.add_subparsers(dest="command", required=True)

    i = sub.add_parser("init", help="write the bundled backbone config")
    i.add_argument("output", help="destination json path")
    i.add_argument("--width", type=float, default=1.0,
                   help="width multiplier in (0, 1]")
    i.set_defaults(fn=_cmd_init)

    c = sub.add_parser("compile", help="lower a backbone config to program + weights")
    c.add_argument("graph", help="backbone config (json)")
    c.add_argument("-o", "--output", required=True, help="program file (.ncp1)")
    c.add_argument("-w", "--weights", required=True, help="weight image (.ncpw)")
    c.add_argument("--seed", type=int, default=0,
                   help="seed for generated weights (default 0)")
    c.add_argument("--weights-in", metavar="NCPW",
                   help="take blob data from an existing weight image")
    c.add_argument("--report", action="store_true", help="print the memory report")
    c.set_defaults(fn=_cmd_compile)

    a = sub.add_parser("asm", help="assemble text to a program file")
    a.add_argument("source")
    a.add_argument("-o", "--output", required=True)
    a.set_defaults(fn=_cmd_asm)

    d = sub.add_parser("disasm", help="disassemble a program file")
    d.add_argument("program")
    d.add_argument("-o", "--output")
    d.set_defaults(fn=_cmd_disasm)

    r = sub.add_parser("run", help="run a program on the simulator")
    r.add_argument("program")
    r.add_argument("weights")
    r.add_argument("image", help="binary PPM (P6)")
    r.add_argument("--mean", type=float, default=128.0)
    r.add_argument("--scale", type=float, default=1.0)
    r.add_argument("--trace", action="store_true")
    r.add_argument("--stats", action="store_true")
    r.add_argument("--out", help="write raw output bytes here")
    r.set_defaults(fn=_cmd_run)

    k = sub.add_parser("check", help="simulator-vs-oracle sweep")
    k.add_argument("graph")
    k.add_argument("--seeds", type=int, default=10)
    k.set_defaults(fn=_cmd_check)

    b = sub.add_parser("bench", help="system-level throughput/efficiency report")
    b.add_argument("graph")
    b.add_argument("--bus", choices=("sdio", "spi"), default="sdio")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, CompileError, IrError, IsaError, SimError,
            host.HostError, asmmod.AsmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
