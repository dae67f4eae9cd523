"""Functional and cycle-approximate model of the co-processor.

Execution is fetch-decode-execute over a byte-accurate six-bank tensor
memory.  Per instruction the model charges:

    conv    ceil(oc/t_oc) * ceil(oh*ow/t_hw) * k*k*ic  + 8  cycles
    dwconv  ceil(c/t_oc) * oh*ow                       + 12 cycles
    others  one cycle per 32-byte word read or written (single-port banks)
    control 0 cycles

The convolution formulas assume the layout-conversion register file hides
transposition (see ``layout_convert_model``) and that instructions never
overlap, matching the one-layer-per-instruction design.  Pipeline-fill
constants (8 and 12) are fixed model parameters.

Energy = macs*e_mac + words*e_word + latency*p_static with coefficients
from ``EnergyCoeffs`` (data/energy_coeffs.json); the defaults are a
documented calibration of the bundled backbone to ~73.6mW at 250MHz, not
a silicon measurement.

A simulator run is single-threaded and deterministic; independent runs
(one TmState each) may proceed in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels, layouts
from .isa import (
    BANK_2,
    BANK_3,
    BANK_BYTES,
    BANK_NAMES,
    Instruction,
    Opcode,
    OperandDesc,
    Program,
    WORD_BYTES,
    operand_extents,
)

CONV_PIPELINE_FILL = 8
DWCONV_PIPELINE_FILL = 12


class SimError(RuntimeError):
    """Runtime fault: bad access, shape mismatch, illegal control flow."""


@dataclass(frozen=True)
class ArchParams:
    t_tm: int = 32          # TM word width in bytes
    t_oc: int = 16          # output-channel parallelism
    t_hw: int = 32          # spatial parallelism
    f_clk: float = 250e6    # Hz


DEFAULT_ARCH = ArchParams()


@dataclass(frozen=True)
class EnergyCoeffs:
    """Per-event energy model; all coefficients >= 0."""

    e_mac_i8: float   # J per int8 MAC
    e_mac_f32: float  # J per float32 MAC
    e_word: float     # J per 32-byte word access
    p_static: float   # W

    def __post_init__(self):
        if min(self.e_mac_i8, self.e_mac_f32, self.e_word, self.p_static) < 0:
            raise ValueError("energy coefficients must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergyCoeffs":
        return cls(e_mac_i8=float(doc["e_mac_i8"]),
                   e_mac_f32=float(doc["e_mac_f32"]),
                   e_word=float(doc["e_word"]),
                   p_static=float(doc["p_static"]))

    @classmethod
    def load(cls, path) -> "EnergyCoeffs":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "EnergyCoeffs":
        text = resources.files("ncpkit").joinpath("data/energy_coeffs.json").read_text()
        return cls.from_dict(json.loads(text))


class TmState:
    """Byte-accurate contents of the six banks; all accesses bounds-checked."""

    def __init__(self):
        self.banks = {b: np.zeros(BANK_BYTES[b], dtype=np.int8) for b in range(6)}

    def read(self, bank: int, byte_off: int, nbytes: int) -> np.ndarray:
        buf = self.banks[bank]
        if byte_off < 0 or byte_off + nbytes > buf.size:
            raise SimError(f"read of {nbytes} bytes at {BANK_NAMES[bank]}+{byte_off} "
                           f"overruns the bank")
        return buf[byte_off:byte_off + nbytes].copy()

    def write(self, bank: int, byte_off: int, data: np.ndarray) -> None:
        buf = self.banks[bank]
        if byte_off < 0 or byte_off + data.size > buf.size:
            raise SimError(f"write of {data.size} bytes at {BANK_NAMES[bank]}+{byte_off} "
                           f"overruns the bank")
        buf[byte_off:byte_off + data.size] = data

    def load_weight_image(self, image) -> None:
        self.banks[BANK_2][:] = np.frombuffer(image.bank2, dtype=np.int8)
        self.banks[BANK_3][:] = np.frombuffer(image.bank3, dtype=np.int8)

    def save_dir(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = []
        for bank, buf in self.banks.items():
            name = BANK_NAMES[bank]
            (path / f"{name}.bin").write_bytes(buf.tobytes())
            manifest.append({"bank": name, "byte_len": int(buf.size),
                             "file": f"{name}.bin"})
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load_dir(cls, path) -> "TmState":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        tm = cls()
        names = {name: bank for bank, name in enumerate(BANK_NAMES)}
        for entry in manifest:
            bank = names[entry["bank"]]
            raw = (path / entry["file"]).read_bytes()
            if len(raw) != entry["byte_len"] or len(raw) != BANK_BYTES[bank]:
                raise SimError(f"bank {entry['bank']} image has wrong size")
            tm.banks[bank][:] = np.frombuffer(raw, dtype=np.int8)
        return tm


@dataclass
class McState:
    pc: int = 0
    status: str = "running"  # running | suspended | ended


@dataclass
class InstrStat:
    pc: int
    mnemonic: str
    cycles: int
    macs_i8: int
    macs_f32: int
    words_read: int
    words_written: int

    @property
    def words(self) -> int:
        return self.words_read + self.words_written


@dataclass
class TraceStats:
    """Per-instruction costs plus run-level derived figures."""

    arch: ArchParams
    coeffs: EnergyCoeffs
    per_instruction: list[InstrStat] = field(default_factory=list)

    def add(self, stat: InstrStat) -> None:
        self.per_instruction.append(stat)

    @property
    def cycles(self) -> int:
        return sum(s.cycles for s in self.per_instruction)

    @property
    def macs_i8(self) -> int:
        return sum(s.macs_i8 for s in self.per_instruction)

    @property
    def macs_f32(self) -> int:
        return sum(s.macs_f32 for s in self.per_instruction)

    @property
    def words(self) -> int:
        return sum(s.words for s in self.per_instruction)

    @property
    def latency_s(self) -> float:
        return self.cycles / self.arch.f_clk

    @property
    def utilization(self) -> float:
        peak = self.cycles * self.arch.t_oc * self.arch.t_hw
        return self.macs_i8 / peak if peak else 0.0

    @property
    def energy_j(self) -> float:
        return (self.macs_i8 * self.coeffs.e_mac_i8
                + self.macs_f32 * self.coeffs.e_mac_f32
                + self.words * self.coeffs.e_word
                + self.latency_s * self.coeffs.p_static)

    @property
    def avg_power_w(self) -> float:
        return self.energy_j / self.latency_s if self.cycles else 0.0

    @property
    def gops(self) -> float:
        ops = 2.0 * (self.macs_i8 + self.macs_f32)
        return ops / self.latency_s / 1e9 if self.cycles else 0.0

    @property
    def fps(self) -> float:
        return 1.0 / self.latency_s if self.cycles else float("inf")

    @property
    def frames_per_s_per_mj(self) -> float:
        return self.fps / (self.energy_j * 1e3) if self.cycles else float("inf")

    def trace_text(self) -> str:
        lines = ["pc    mnemonic  cycles     macs_i8     macs_f32  words"]
        for s in self.per_instruction:
            lines.append(f"{s.pc:<5} {s.mnemonic:<8} {s.cycles:>8} {s.macs_i8:>11} "
                         f"{s.macs_f32:>12} {s.words:>6}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "cycles": self.cycles,
            "latency_ms": self.latency_s * 1e3,
            "macs_i8": self.macs_i8,
            "macs_f32": self.macs_f32,
            "tm_words": self.words,
            "gops": self.gops,
            "utilization": self.utilization,
            "energy_mj": self.energy_j * 1e3,
            "avg_power_mw": self.avg_power_w * 1e3,
            "fps_compute": self.fps,
            "frames_per_s_per_mj": self.frames_per_s_per_mj,
        }

    def summary_text(self) -> str:
        doc = self.summary()
        return "".join(f"{k:<22} {v:.6g}\n" if isinstance(v, float)
                       else f"{k:<22} {v}\n" for k, v in doc.items())


def _words(nbytes: int) -> int:
    return -(-nbytes // WORD_BYTES)


def _out_shape_of(ins: Instruction) -> tuple[int, int, int]:
    op = ins.opcode
    if op == Opcode.CONV:
        return ins.oc, -(-ins.ih // ins.stride), -(-ins.iw // ins.stride)
    if op == Opcode.DWCONV:
        return ins.ic, -(-ins.ih // ins.stride), -(-ins.iw // ins.stride)
    if op in (Opcode.DSAM, Opcode.MAXP):
        return ins.ic, -(-ins.ih // 2), -(-ins.iw // 2)
    if op == Opcode.USAM:
        return ins.ic, ins.ih * 2, ins.iw * 2
    if op == Opcode.GAP:
        return ins.ic, 1, 1
    return ins.ic, ins.ih, ins.iw


def conv_cycles(ih: int, iw: int, ic: int, oc: int, k: int, stride: int,
                arch: ArchParams = DEFAULT_ARCH) -> int:
    oh, ow = -(-ih // stride), -(-iw // stride)
    return (-(-oc // arch.t_oc)) * (-(-(oh * ow) // arch.t_hw)) * (k * k * ic) \
        + CONV_PIPELINE_FILL


def dwconv_cycles(ih: int, iw: int, c: int, stride: int,
                  arch: ArchParams = DEFAULT_ARCH) -> int:
    oh, ow = -(-ih // stride), -(-iw // stride)
    return (-(-c // arch.t_oc)) * oh * ow + DWCONV_PIPELINE_FILL


def dwconv_efficiency(c: int, oh: int, ow: int,
                      arch: ArchParams = DEFAULT_ARCH) -> float:
    work = (-(-c // arch.t_oc)) * oh * ow
    return work / (work + DWCONV_PIPELINE_FILL)


def peak_performance(arch: ArchParams = DEFAULT_ARCH) -> float:
    """GOP/s with every int8 MAC and post-processing pipe busy."""
    macs = arch.t_oc * arch.t_hw + arch.t_oc
    return macs * 2.0 * arch.f_clk / 1e9


def layout_convert_model(n_tiles: int, arch: ArchParams = DEFAULT_ARCH
                         ) -> tuple[int, int]:
    """(cycles, stalls) to stream n t_oc-by-t_hw tiles through the converter.

    Two register arrays ping-pong: filling takes t_hw cycles, draining
    t_oc.  Drain overlaps the next fill, so with t_oc <= t_hw the
    pipeline never stalls.
    """
    if n_tiles <= 0:
        return 0, 0
    per_tile_stall = max(0, arch.t_oc - arch.t_hw)
    cycles = arch.t_hw + (n_tiles - 1) * max(arch.t_hw, arch.t_oc) + arch.t_oc
    return cycles, (n_tiles - 1) * per_tile_stall


def convert_tile(tile: np.ndarray) -> np.ndarray:
    """Functional effect of one pass through the conversion arrays."""
    return tile.T.copy()


def _fetch(tm: TmState, desc: OperandDesc, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    raw = tm.read(desc.bank, desc.byte_off, c * h * w)
    return layouts.decode(raw, (c, h, w), desc.layout)


def _store(tm: TmState, desc: OperandDesc, arr: np.ndarray) -> None:
    tm.write(desc.bank, desc.byte_off, layouts.encode(arr, desc.layout))


def _check_overlap(ins: Instruction) -> None:
    """In-place operands are unsafe except exact-identity bn/relu."""
    ext = operand_extents(ins)
    dst = next(((d, n) for name, d, n in ext if name == "dst"), None)
    if dst is None:
        return
    ddesc, dlen = dst
    for name, desc, nbytes in ext:
        if name == "dst":
            continue
        if desc.bank != ddesc.bank:
            continue
        a0, a1 = desc.byte_off, desc.byte_off + nbytes
        b0, b1 = ddesc.byte_off, ddesc.byte_off + dlen
        if a0 < b1 and b0 < a1:
            identical = (a0, a1) == (b0, b1) and desc.layout == ddesc.layout
            if identical and ins.opcode in (Opcode.BN, Opcode.RELU):
                continue
            raise SimError(
                f"{ins.mnemonic}: operand {name} overlaps dst in bank "
                f"{BANK_NAMES[ddesc.bank]}")


def _read_bn(tm: TmState, desc: OperandDesc, c: int) -> tuple[np.ndarray, np.ndarray]:
    raw = tm.read(desc.bank, desc.byte_off, 8 * c)
    pairs = np.frombuffer(raw.tobytes(), dtype="<f4").reshape(c, 2)
    return np.ascontiguousarray(pairs[:, 0]), np.ascontiguousarray(pairs[:, 1])


def _exec_neural(ins: Instruction, tm: TmState, arch: ArchParams) -> InstrStat:
    _check_overlap(ins)
    for name, desc, nbytes in operand_extents(ins):
        if desc.byte_off + nbytes > BANK_BYTES[desc.bank]:
            raise SimError(f"{ins.mnemonic}: {name} overruns bank "
                           f"{BANK_NAMES[desc.bank]}")

    op = ins.opcode
    ic, ih, iw = ins.ic, ins.ih, ins.iw
    oc, oh, ow = _out_shape_of(ins)
    macs_i8 = macs_f32 = 0

    if op == Opcode.CONV:
        k = 3 if ins.k3 else 1
        x = _fetch(tm, ins.src0, (ic, ih, iw))
        wraw = tm.read(ins.src1.bank, ins.src1.byte_off, oc * ic * k * k)
        w = wraw.reshape(oc, ic, k, k)
        scale = bias = None
        if ins.bn_en:
            scale, bias = _read_bn(tm, ins.par, oc)
        y = kernels.conv2d(x, w, ins.stride, scale, bias, ins.bn_en, ins.relu_en)
        _store(tm, ins.dst, y)
        macs_i8 = oh * ow * oc * k * k * ic
        macs_f32 = oh * ow * oc if ins.bn_en else 0
        cycles = conv_cycles(ih, iw, ic, oc, k, ins.stride, arch)
    elif op == Opcode.DWCONV:
        x = _fetch(tm, ins.src0, (ic, ih, iw))
        w = tm.read(ins.src1.bank, ins.src1.byte_off, ic * 9).reshape(ic, 3, 3)
        scale = bias = None
        if ins.bn_en:
            scale, bias = _read_bn(tm, ins.par, ic)
        y = kernels.dwconv2d(x, w, ins.stride, scale, bias, ins.bn_en, ins.relu_en)
        _store(tm, ins.dst, y)
        macs_i8 = oh * ow * ic * 9
        macs_f32 = oh * ow * ic if ins.bn_en else 0
        cycles = dwconv_cycles(ih, iw, ic, ins.stride, arch)
    else:
        x = _fetch(tm, ins.src0, (ic, ih, iw))
        if op == Opcode.BN:
            scale, bias = _read_bn(tm, ins.par, ic)
            y = kernels.postprocess(x, scale, bias, bn_en=True, relu_en=False)
            macs_f32 = ih * iw * ic
        elif op == Opcode.RELU:
            y = kernels.postprocess(x, bn_en=False, relu_en=True)
        elif op == Opcode.ADD:
            b = _fetch(tm, ins.src1, (ic, ih, iw))
            y = kernels.add_sat(x, b)
        elif op == Opcode.MOVE:
            y = x
        elif op == Opcode.DSAM:
            y = kernels.downsample2(x)
        elif op == Opcode.USAM:
            y = kernels.upsample2(x)
        elif op == Opcode.MAXP:
            y = kernels.maxpool2(x)
        elif op == Opcode.GAP:
            y = kernels.global_avg(x)
        else:  # pragma: no cover
            raise SimError(f"unhandled opcode {op}")
        _store(tm, ins.dst, y)
        cycles = 0  # charged below from word counts

    words_read = words_written = 0
    for name, desc, nbytes in operand_extents(ins):
        if name == "dst":
            words_written += _words(nbytes)
        else:
            words_read += _words(nbytes)
    if op not in (Opcode.CONV, Opcode.DWCONV):
        cycles = words_read + words_written
    return InstrStat(pc=-1, mnemonic=ins.mnemonic, cycles=cycles,
                     macs_i8=macs_i8, macs_f32=macs_f32,
                     words_read=words_read, words_written=words_written)


def run(program: Program, tm: TmState, arch: ArchParams = DEFAULT_ARCH,
        coeffs: EnergyCoeffs | None = None, max_steps: int = 1_000_000
        ) -> tuple[McState, TraceStats]:
    """Execute until end (PC resets) or sup (PC preserved); returns stats."""
    coeffs = coeffs or EnergyCoeffs.default()
    stats = TraceStats(arch=arch, coeffs=coeffs)
    mc = McState()
    steps = 0
    while True:
        if steps >= max_steps:
            raise SimError(f"exceeded {max_steps} executed instructions")
        steps += 1
        if not 0 <= mc.pc < len(program):
            raise SimError(f"PC {mc.pc} out of range")
        ins = program[mc.pc]
        if ins.opcode == Opcode.END:
            stats.add(InstrStat(mc.pc, "end", 0, 0, 0, 0, 0))
            mc.status = "ended"
            mc.pc = 0
            return mc, stats
        if ins.opcode == Opcode.SUP:
            stats.add(InstrStat(mc.pc, "sup", 0, 0, 0, 0, 0))
            mc.status = "suspended"
            mc.pc += 1  # resume after the suspend point
            return mc, stats
        if ins.opcode == Opcode.JUMP:
            stats.add(InstrStat(mc.pc, "jump", 0, 0, 0, 0, 0))
            mc.pc = ins.jump_target
            continue
        stat = _exec_neural(ins, tm, arch)
        stats.add(InstrStat(mc.pc, stat.mnemonic, stat.cycles, stat.macs_i8,
                            stat.macs_f32, stat.words_read, stat.words_written))
        mc.pc += 1
