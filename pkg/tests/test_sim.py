"""Simulator: cycle formulas, control flow, TM safety, energy model."""

import numpy as np
import pytest

from helpers import tiny_config

from ncpkit import harness, layouts
from ncpkit.blocks import random_model
from ncpkit.compiler import compile_graph
from ncpkit.isa import (
    BANK_0,
    BANK_1,
    Instruction,
    Opcode,
    OperandDesc,
    Program,
)
from ncpkit.sim import (
    ArchParams,
    DEFAULT_ARCH,
    EnergyCoeffs,
    SimError,
    TmState,
    conv_cycles,
    convert_tile,
    dwconv_cycles,
    dwconv_efficiency,
    layout_convert_model,
    peak_performance,
    run,
)

END = Instruction(opcode=Opcode.END)
COEFFS = EnergyCoeffs.default()


class TestCycleFormulas:
    def test_conv_cycles_example(self):
        assert conv_cycles(128, 128, 8, 32, 3, 2) == 18440

    def test_dwconv_cycles_example(self):
        assert dwconv_cycles(64, 64, 16, 1) == 4108

    def test_dwconv_efficiency_example(self):
        eff = dwconv_efficiency(16, 64, 64)
        assert eff == 4096 / 4108
        assert eff > 0.997

    def test_conv_macs_per_cycle_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ih, iw = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            ic, oc = int(rng.integers(1, 129)), int(rng.integers(1, 129))
            k = int(rng.choice((1, 3)))
            s = int(rng.integers(1, 3))
            oh, ow = -(-ih // s), -(-iw // s)
            macs = oh * ow * oc * k * k * ic
            assert macs <= conv_cycles(ih, iw, ic, oc, k, s) * 512


class TestPeakPerformance:
    def test_default_is_264(self):
        assert peak_performance(DEFAULT_ARCH) == 264.0

    def test_half_clock(self):
        assert peak_performance(ArchParams(f_clk=125e6)) == 132.0

    def test_narrow_array(self):
        assert peak_performance(ArchParams(t_oc=8, t_hw=32, f_clk=250e6)) == 132.0


class TestLayoutConverter:
    def test_steady_state_no_stalls(self):
        cycles, stalls = layout_convert_model(1000)
        assert stalls == 0

    def test_single_tile_latency(self):
        cycles, stalls = layout_convert_model(1)
        assert cycles == 32 + 16 == 48
        assert stalls == 0

    def test_transpose_involution(self):
        rng = np.random.default_rng(1)
        tile = rng.integers(-128, 128, size=(16, 32)).astype(np.int8)
        assert np.array_equal(convert_tile(convert_tile(tile)), tile)

    def test_slow_drain_stalls(self):
        cycles, stalls = layout_convert_model(10, ArchParams(t_oc=32, t_hw=16))
        assert stalls == 9 * 16


class TestControlFlow:
    def test_end_only(self):
        mc, stats = run(Program([END]), TmState(), coeffs=COEFFS)
        assert mc.status == "ended"
        assert mc.pc == 0
        assert stats.cycles == 0

    def test_jump_skips_sup(self):
        prog = Program([Instruction(opcode=Opcode.JUMP, jump_target=2),
                        Instruction(opcode=Opcode.SUP), END])
        mc, stats = run(prog, TmState(), coeffs=COEFFS)
        assert mc.status == "ended"
        assert [s.mnemonic for s in stats.per_instruction] == ["jump", "end"]

    def test_sup_preserves_resume_point(self):
        prog = Program([Instruction(opcode=Opcode.SUP), END])
        mc, _ = run(prog, TmState(), coeffs=COEFFS)
        assert mc.status == "suspended"
        assert mc.pc == 1

    def test_runaway_pc_faults(self):
        prog = Program([Instruction(opcode=Opcode.JUMP, jump_target=5), END])
        with pytest.raises(SimError, match="PC"):
            run(prog, TmState(), coeffs=COEFFS)

    def test_infinite_loop_hits_step_limit(self):
        prog = Program([Instruction(opcode=Opcode.JUMP, jump_target=0), END])
        with pytest.raises(SimError, match="exceeded"):
            run(prog, TmState(), coeffs=COEFFS, max_steps=100)


def relu_ins(words_shape=(2, 4, 4), src_bank=BANK_0, dst_bank=BANK_1,
             src_off=0, dst_off=0):
    c, h, w = words_shape
    return Instruction(opcode=Opcode.RELU, ih=h, iw=w, ic=c,
                       src0=OperandDesc(src_bank, src_off),
                       dst=OperandDesc(dst_bank, dst_off))


class TestExecution:
    def test_simple_op_cycles_are_word_counts(self):
        # 2*4*4 = 32 bytes: 1 word in, 1 word out
        mc, stats = run(Program([relu_ins(), END]), TmState(), coeffs=COEFFS)
        assert stats.per_instruction[0].cycles == 2

    def test_tm_bounds_fault(self):
        ins = relu_ins(src_off=4095)  # 32 bytes at the last word: ok
        run(Program([ins, END]), TmState(), coeffs=COEFFS)
        bad = relu_ins(words_shape=(2, 4, 8), src_off=4095)  # 64 bytes: overrun
        with pytest.raises(SimError, match="overrun"):
            run(Program([bad, END]), TmState(), coeffs=COEFFS)

    def test_partial_overlap_faults(self):
        bad = relu_ins(src_bank=BANK_0, dst_bank=BANK_0, src_off=0, dst_off=0)
        bad2 = Instruction(opcode=Opcode.ADD, ih=4, iw=4, ic=2,
                           src0=OperandDesc(BANK_0, 0),
                           src1=OperandDesc(BANK_0, 1),
                           dst=OperandDesc(BANK_0, 0))
        # exact in-place relu is allowed
        run(Program([bad, END]), TmState(), coeffs=COEFFS)
        with pytest.raises(SimError, match="overlap"):
            run(Program([bad2, END]), TmState(), coeffs=COEFFS)

    def test_determinism(self):
        cfg = tiny_config()
        g = random_model(3, cfg)
        res = compile_graph(g)
        inp = harness.random_input(3, cfg.input)
        a = harness.execute(res, inp)
        b = harness.execute(res, inp)
        assert a.out_bytes == b.out_bytes
        assert a.stats.summary() == b.stats.summary()
        assert [vars(x) for x in a.stats.per_instruction] == \
               [vars(y) for y in b.stats.per_instruction]

    def test_energy_monotone_in_instructions(self):
        base = Program([relu_ins(), END])
        more = Program([relu_ins(), relu_ins(), END])
        _, s1 = run(base, TmState(), coeffs=COEFFS)
        _, s2 = run(more, TmState(), coeffs=COEFFS)
        assert s2.energy_j >= s1.energy_j

    def test_utilization_in_range(self):
        cfg = tiny_config()
        g = random_model(11, cfg)
        out = harness.execute(compile_graph(g), harness.random_input(1, cfg.input))
        assert 0.0 <= out.stats.utilization <= 1.0


class TestTraceOutputs:
    def test_trace_and_summary_render(self):
        cfg = tiny_config()
        g = random_model(2, cfg)
        out = harness.execute(compile_graph(g), harness.random_input(2, cfg.input))
        text = out.stats.trace_text()
        assert "dwconv" in text and "conv" in text and "gap" in text
        summary = out.stats.summary()
        for key in ("latency_ms", "gops", "utilization", "energy_mj",
                    "avg_power_mw", "frames_per_s_per_mj"):
            assert key in summary
        assert out.stats.summary_text()

    def test_gop_accounting(self):
        # one conv: ops = 2 * macs, gops = ops / latency / 1e9
        x = Instruction(opcode=Opcode.CONV, stride=1, k3=False, ih=4, iw=4,
                        ic=2, oc=2, src0=OperandDesc(BANK_0, 0),
                        src1=OperandDesc(3, 0), dst=OperandDesc(BANK_1, 0))
        _, stats = run(Program([x, END]), TmState(), coeffs=COEFFS)
        assert stats.macs_i8 == 4 * 4 * 2 * 2
        lat = stats.cycles / DEFAULT_ARCH.f_clk
        assert stats.gops == pytest.approx(2 * stats.macs_i8 / lat / 1e9)


class TestTmState:
    def test_save_load_dir(self, tmp_path):
        tm = TmState()
        tm.banks[BANK_0][:16] = np.arange(16, dtype=np.int8)
        tm.save_dir(tmp_path / "tm")
        again = TmState.load_dir(tmp_path / "tm")
        for b in range(6):
            assert np.array_equal(tm.banks[b], again.banks[b])

    def test_read_is_a_copy(self):
        tm = TmState()
        view = tm.read(BANK_0, 0, 8)
        view[:] = 5
        assert tm.banks[BANK_0][0] == 0


class TestLayoutRoundTrip:
    @pytest.mark.parametrize("c,h,w", [(1, 4, 4), (3, 5, 7), (32, 4, 4),
                                       (33, 3, 3), (70, 2, 5), (128, 2, 2)])
    @pytest.mark.parametrize("layout", [0, 1])
    def test_encode_decode(self, c, h, w, layout):
        rng = np.random.default_rng(c * h * w)
        arr = rng.integers(-128, 128, size=(c, h, w)).astype(np.int8)
        flat = layouts.encode(arr, layout)
        assert flat.size == c * h * w
        assert np.array_equal(layouts.decode(flat, (c, h, w), layout), arr)

    def test_interleaved_word_is_channels_of_one_pixel(self):
        arr = np.arange(32 * 2 * 2, dtype=np.int8).reshape(32, 2, 2)
        flat = layouts.encode(arr, 1)
        # first 32 bytes = channels 0..31 of pixel (0, 0)
        assert np.array_equal(flat[:32], arr[:, 0, 0])
