"""End-to-end acceptance gates.

Each class pins one user-visible guarantee of the whole pipeline: agreement
with the scalar oracle under every engine and pass combination, frozen batch
schedules, stack-freedom for loop programs, sampler statistics, gradient
occupancy, kernel correctness, and fault reporting. Tolerances and golden
numbers here are load-bearing; loosening them is a behavior change.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import scalar_reference_batch
from lockstep import (
    compile_program,
    compile_source,
    pc_vm,
    run_local,
    trace_local,
    workloads,
)
from lockstep.compiler import CompileOptions, cancel_pop_push, flatten
from lockstep.errors import StackOverflow, StepLimitExceeded
from lockstep.ir import Pop, Push
from lockstep.metrics import utilization
from lockstep.runtime import resolve_kernel
from lockstep.workloads import (
    NutsConfig,
    chain_array,
    correlated_gaussian,
    logistic_regression,
    nuts_lite_source,
    registered_targets,
)

Z_CYCLE = (1, 2, 4, 7, 32)
ALL_OPTION_COMBOS = [
    CompileOptions(*bits) for bits in itertools.product([True, False], repeat=4)
]
SPIN = "def spin(n) { while (0 <= n) { n = n + 1; } return n; }"


def assert_matches_reference(got: np.ndarray, ref: np.ndarray, label: str):
    if got.dtype.kind in "ib":
        assert np.array_equal(got, ref), label
    else:
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=0.0,
                                   err_msg=label)


class TestOracleEquivalence:
    """Both engines replay the scalar oracle over the whole corpus, batch
    width and pass toggles varying per batch."""

    def test_fifty_random_batches_per_program(self, compiled_corpus):
        start = time.monotonic()
        rng = np.random.default_rng(2024)
        for prog, cfg, _ in compiled_corpus:
            variants = {}
            for b in range(50):
                z = Z_CYCLE[b % len(Z_CYCLE)]
                ins = prog.make_inputs(rng, z)
                ref = scalar_reference_batch(cfg, ins)
                opts = ALL_OPTION_COMBOS[b % len(ALL_OPTION_COMBOS)]
                if opts not in variants:
                    variants[opts] = compile_program(cfg, opts)
                got_pc, _ = pc_vm.run(variants[opts], ins, depth=64)
                got_local = run_local(cfg, ins)
                assert_matches_reference(got_pc, ref, f"{prog.name} batch {b} pc")
                assert_matches_reference(got_local, ref, f"{prog.name} batch {b} local")
        assert time.monotonic() - start < 60.0


class TestFrozenResults:
    @pytest.mark.parametrize("engine", ["local", "pc"])
    @pytest.mark.parametrize("ins,want", [
        ([3, 7, 4, 5], [3, 21, 5, 8]),
        ([6, 7, 8, 9], [13, 21, 34, 55]),
    ])
    def test_fib_goldens(self, fib_prog, fib_compiled, engine, ins, want):
        if engine == "local":
            out = run_local(fib_prog, [np.array(ins)])
        else:
            out, _ = pc_vm.run(fib_compiled, [np.array(ins)], depth=32)
        assert out.tolist() == want


class TestLoopProgramsNeedNoDataStacks:
    """Programs without recursion never touch a data stack: the pc engine's
    trace records zero pushes, pops, or updates for them."""

    @pytest.mark.parametrize("name", ["countdown", "twosite", "poly"])
    def test_trace_shows_no_stack_traffic(self, compiled_corpus, name):
        by_name = {p.name: (p, c) for p, _, c in compiled_corpus}
        prog, compiled = by_name[name]
        ins = prog.make_inputs(np.random.default_rng(11), 8)
        _, tr = pc_vm.run(compiled, ins, depth=16)
        assert tr.step_count > 0
        assert tr.stack_ops == {}
        assert compiled.stacked == frozenset()


class TestCrossDepthSchedules:
    """Skewed two-lane fib batches: the flattened VM finishes in fewer steps
    than block-level lockstep because lanes at different recursion depths
    share blocks. Step counts are frozen."""

    GOLDEN = {4: (47, 45), 6: (130, 123), 8: (347, 327)}

    @pytest.mark.parametrize("k", sorted(GOLDEN))
    def test_step_counts_and_depth_mixing(self, fib_prog, fib_compiled, k):
        ins = [np.array([k, k + 1])]
        _, lt = trace_local(fib_prog, ins)

        mixed = []

        def observer(m, b, sel):
            ptr = m.stacks["fibonacci.n"].pointers
            mixed.append(len(np.unique(ptr[sel])) > 1)

        _, pt = pc_vm.run(fib_compiled, ins, depth=48, observer=observer)
        want_local, want_pc = self.GOLDEN[k]
        assert lt.step_count == want_local
        assert pt.step_count == want_pc
        assert pt.step_count < lt.step_count
        assert any(mixed)


class TestPassToggleEquivalence:
    """Every subset of compiler passes is a pure pessimization: all 16
    combinations produce bit-identical outputs."""

    def test_all_sixteen_combos_bit_identical(self, compiled_corpus):
        rng = np.random.default_rng(5)
        for prog, cfg, _ in compiled_corpus:
            ins = prog.make_inputs(rng, 4)
            outs = set()
            for opts in ALL_OPTION_COMBOS:
                out, _ = pc_vm.run(compile_program(cfg, opts), ins, depth=64)
                outs.add(out.tobytes())
            assert len(outs) == 1, prog.name

    def test_cancellation_idempotent(self, compiled_corpus):
        for _, cfg, _ in compiled_corpus:
            flat, _ = flatten(cfg)
            once = cancel_pop_push(flat)
            assert cancel_pop_push(once) == once

    def test_no_cancellable_pairs_survive(self, compiled_corpus):
        def pairs(flat):
            found = []
            for bi, block in enumerate(flat.blocks):
                for oi, op in enumerate(block.ops):
                    if not isinstance(op, Pop):
                        continue
                    for later in block.ops[oi + 1:]:
                        if isinstance(later, Pop):
                            if later.var == op.var:
                                break
                            continue
                        if isinstance(later, Push) and later.output == op.var:
                            if op.var not in later.inputs:
                                found.append((bi, oi, op.var))
                            break
                        if later.output == op.var or op.var in later.inputs:
                            break
            return found

        for _, cfg, _ in compiled_corpus:
            flat, _ = flatten(cfg)
            assert pairs(cancel_pop_push(flat)) == []


class TestCommitModeEquivalence:
    """Masked writes and gather/scatter writes are interchangeable: same
    outputs, same schedule, same stack traffic, on every corpus program."""

    def test_pc_engine(self, compiled_corpus):
        rng = np.random.default_rng(17)
        for prog, _, compiled in compiled_corpus:
            ins = prog.make_inputs(rng, 6)
            out_m, tr_m = pc_vm.run(compiled, ins, depth=64, mode="masked")
            out_g, tr_g = pc_vm.run(compiled, ins, depth=64, mode="gather")
            assert out_m.tobytes() == out_g.tobytes(), prog.name
            assert tr_m.steps == tr_g.steps, prog.name
            assert tr_m.stack_ops == tr_g.stack_ops, prog.name

    def test_local_engine(self, compiled_corpus):
        rng = np.random.default_rng(17)
        for prog, cfg, _ in compiled_corpus:
            ins = prog.make_inputs(rng, 6)
            out_m, tr_m = trace_local(cfg, ins, mode="masked")
            out_g, tr_g = trace_local(cfg, ins, mode="gather")
            assert out_m.tobytes() == out_g.tobytes(), prog.name
            assert tr_m.steps == tr_g.steps, prog.name


class TestSamplerStatistics:
    """The generated no-U-turn sampler recovers the moments of a correlated
    gaussian, and both engines produce the identical chain."""

    def test_full_run_matches_target_moments(self):
        start = time.monotonic()
        config = NutsConfig(step_size=0.25, leaf_steps=4, max_depth=6,
                            iterations=400, seed=0)
        target = correlated_gaussian(2, 0.5)
        src = nuts_lite_source(config, target)
        cfg = compile_source(src, "nuts_main")
        compiled = compile_program(cfg)

        z = 64
        q0 = np.zeros((z, target.dim))
        key = np.random.default_rng(config.seed).integers(0, 2**31, size=z)
        ins = [q0, key.astype(np.int64)]

        flat_local = run_local(cfg, ins)
        flat_pc, _ = pc_vm.run(compiled, ins, depth=config.min_stack_depth)
        assert flat_local.tobytes() == flat_pc.tobytes()

        chain = chain_array(flat_pc, config, target.dim)
        samples = chain.reshape(-1, target.dim)
        mean_ref, cov_ref = target.reference_moments()

        mean = samples.mean(axis=0)
        centered = samples - mean
        cov = centered.T @ centered / (samples.shape[0] - 1)

        assert np.abs(mean - mean_ref).max() < 0.1
        assert np.abs(cov - cov_ref).max() < 0.15
        assert time.monotonic() - start < 300.0


class TestGradientOccupancy:
    """On a skewed batch the flattened VM keeps gradient lanes busier than
    block-level lockstep; with one lane both engines are trivially full."""

    CONFIG = NutsConfig(step_size=0.25, leaf_steps=4, max_depth=6,
                        iterations=12, seed=0)

    def _run_both(self, z):
        target = correlated_gaussian(2, 0.5)
        src = nuts_lite_source(self.CONFIG, target)
        cfg = compile_source(src, "nuts_main")
        compiled = compile_program(cfg)
        q0 = np.zeros((z, target.dim))
        key = np.random.default_rng(3).integers(0, 2**31, size=z)
        ins = [q0, key.astype(np.int64)]
        _, lt = trace_local(cfg, ins)
        _, pt = pc_vm.run(compiled, ins, depth=self.CONFIG.min_stack_depth)
        counted = {target.grad}
        return utilization(lt, counted), utilization(pt, counted), lt, pt

    def test_wide_batch_separates_the_engines(self):
        u_local, u_pc, lt, pt = self._run_both(z=30)
        assert u_local < 1.0
        assert u_pc >= u_local
        assert u_pc / u_local >= 1.5
        assert pt.step_count < lt.step_count

    def test_single_lane_is_always_full(self):
        u_local, u_pc, _, _ = self._run_both(z=1)
        assert u_local == 1.0
        assert u_pc == 1.0


class TestGradientKernels:
    """Every registered gradient kernel matches central finite differences
    of its density, and the integrator is time-reversible."""

    def test_gradients_match_finite_differences(self):
        # make sure the canonical trio exists, then sweep everything built
        correlated_gaussian(2, 0.5)
        correlated_gaussian(3, -0.2)
        logistic_regression(200, 5, seed=7)
        assert len(registered_targets()) >= 3

        for t in registered_targets():
            lp = resolve_kernel(t.logpdf).fn
            gr = resolve_kernel(t.grad).fn
            rng = np.random.default_rng(hash(t.name) % (2**32))
            pts = rng.normal(size=(10, t.dim))
            g = gr((pts,), pts.shape[0])
            h = 1e-6
            for i in range(t.dim):
                e = np.zeros(t.dim)
                e[i] = h
                fd = (lp((pts + e,), 10) - lp((pts - e,), 10)) / (2 * h)
                rel = np.abs(g[:, i] - fd) / np.maximum(np.abs(fd), 1e-12)
                assert rel.max() < 1e-5, (t.name, i, rel.max())

    def test_leapfrog_is_reversible(self):
        config = NutsConfig(step_size=0.25, leaf_steps=4, max_depth=6,
                            iterations=400, seed=0)
        target = correlated_gaussian(2, 0.5)
        src = nuts_lite_source(config, target)
        cfg = compile_source(src, "leapfrog")

        rng = np.random.default_rng(101)
        q0 = rng.normal(size=(1, 2))
        p0 = rng.normal(size=(1, 2))
        eps = np.array([config.step_size])

        fwd = run_local(cfg, [q0, p0, eps])
        q1, p1 = fwd[:, :2], fwd[:, 2:]
        back = run_local(cfg, [q1, -p1, eps])
        q2, p2 = back[:, :2], back[:, 2:]

        assert np.abs(q2 - q0).max() < 1e-10
        assert np.abs(p2 + p0).max() < 1e-10


class TestFaultReporting:
    def test_stack_overflow_names_lane_and_variable(self, fib_compiled):
        with pytest.raises(StackOverflow) as ei:
            pc_vm.run(fib_compiled, [np.array([10])], depth=3)
        err = ei.value
        assert err.lane == 0
        assert err.variable.startswith("fibonacci.")
        msg = str(err)
        assert "lane 0" in msg and err.variable in msg

    def test_step_limit_hits_configured_bound_on_both_engines(self):
        cfg = compile_source(SPIN)
        with pytest.raises(StepLimitExceeded) as local_err:
            run_local(cfg, [np.array([0])], max_steps=1000)
        assert local_err.value.limit == 1000

        compiled = compile_program(cfg)
        with pytest.raises(StepLimitExceeded) as pc_err:
            pc_vm.run(compiled, [np.array([0])], depth=8, max_steps=1000)
        assert pc_err.value.limit == 1000
