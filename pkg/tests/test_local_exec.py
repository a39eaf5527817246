"""Masked block-scheduling engine: goldens, masking, limits, choosers."""

import numpy as np
import pytest

from lockstep import compile_source, run_local, run_scalar_reference, trace_local
from lockstep.errors import HostRecursionLimit, StepLimitExceeded
from lockstep.local_exec import _min_pc_chooser

SPIN = "def spin(n) { while (0 <= n) { n = n + 1; } return n; }"


class TestGoldens:
    def test_fib_small_batch(self, fib_prog):
        out = run_local(fib_prog, [np.array([3, 7, 4, 5])])
        assert out.tolist() == [3, 21, 5, 8]

    def test_fib_second_batch(self, fib_prog):
        out = run_local(fib_prog, [np.array([6, 7, 8, 9])])
        assert out.tolist() == [13, 21, 34, 55]

    def test_base_cases(self, fib_prog):
        assert run_local(fib_prog, [np.array([0, 1])]).tolist() == [1, 1]


class TestMasking:
    def test_uniform_lanes_stay_fully_active(self, fib_prog):
        out, tr = trace_local(fib_prog, [np.array([5, 5])])
        assert out.tolist() == [8, 8]
        assert all(s.active == 2 for s in tr.steps)

    def test_divergent_lanes_split(self, fib_prog):
        _, tr = trace_local(fib_prog, [np.array([2, 9])])
        assert any(s.active == 1 for s in tr.steps)

    def test_gather_mode_bit_identical(self, fib_prog):
        ins = [np.array([4, 9, 0, 6])]
        a = run_local(fib_prog, ins, mode="masked")
        b = run_local(fib_prog, ins, mode="gather")
        assert a.tobytes() == b.tobytes()

    def test_unknown_mode_rejected(self, fib_prog):
        with pytest.raises(ValueError):
            run_local(fib_prog, [np.array([1])], mode="vector")


class TestLimits:
    def test_step_limit_raises(self):
        prog = compile_source(SPIN, "spin")
        with pytest.raises(StepLimitExceeded) as ei:
            run_local(prog, [np.array([0])], max_steps=1000)
        assert ei.value.limit == 1000

    def test_host_recursion_limit(self, fib_prog):
        with pytest.raises(HostRecursionLimit):
            run_local(fib_prog, [np.array([30])], max_depth=10)

    def test_scalar_reference_honors_limits(self):
        prog = compile_source(SPIN, "spin")
        with pytest.raises(StepLimitExceeded):
            run_scalar_reference(prog, [np.array([0])], max_steps=500)


class TestChooser:
    def test_min_pc_selects_lowest_block(self):
        pc = np.array([3, 1, 1, 7])
        cand = pc < 9
        sel = _min_pc_chooser(pc, cand)
        assert sel.tolist() == [False, True, True, False]

    def test_chooser_must_pick_single_block(self, fib_prog):
        def bad(pc, cand):
            return cand  # mixes blocks as soon as lanes diverge
        with pytest.raises(ValueError):
            run_local(fib_prog, [np.array([2, 9])], chooser=bad)

    def test_chooser_must_pick_nonempty(self, fib_prog):
        def empty(pc, cand):
            return np.zeros_like(cand)
        with pytest.raises(ValueError):
            run_local(fib_prog, [np.array([2, 9])], chooser=empty)

    def test_alternate_chooser_same_result(self, fib_prog):
        def max_pc(pc, cand):
            return cand & (pc == pc[cand].max())
        a = run_local(fib_prog, [np.array([5, 8, 3])])
        b = run_local(fib_prog, [np.array([5, 8, 3])], chooser=max_pc)
        assert a.tobytes() == b.tobytes()


class TestInputValidation:
    def test_wrong_arity(self, fib_prog):
        with pytest.raises(ValueError):
            run_local(fib_prog, [np.array([1]), np.array([2])])

    def test_mismatched_widths(self):
        prog = compile_source("def f(a, b) { return a + b; }")
        with pytest.raises(ValueError):
            run_local(prog, [np.array([1, 2]), np.array([3])])

    def test_shape_conflict_across_writes_rejected(self):
        src = "def f(x) { v = vfill:2(x); v = vfill:3(x); return vget(v, 0); }"
        prog = compile_source(src)
        with pytest.raises(TypeError):
            run_local(prog, [np.array([1.0])])


class TestTraceShape:
    def test_records_carry_prim_counts(self, fib_prog):
        _, tr = trace_local(fib_prog, [np.array([5])])
        assert tr.engine == "local" and tr.z == 1
        first = tr.steps[0]
        assert first.block == "fibonacci.0"
        assert first.prims.get("le") == 1 and first.prims.get("const:i64:1") == 1

    def test_local_never_touches_data_stacks(self, fib_prog):
        _, tr = trace_local(fib_prog, [np.array([7])])
        assert tr.stack_ops == {}
