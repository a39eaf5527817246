"""Benchmark programs, target densities, and the sampler generator."""

import numpy as np
import pytest

from lockstep import compile_program, compile_source, pc_vm, run_local, workloads
from lockstep.runtime import known_kernel, resolve_kernel
from lockstep.workloads import (
    NutsConfig,
    TINY_NUTS,
    chain_array,
    corpus,
    corpus_program,
    correlated_gaussian,
    logistic_regression,
    nuts_lite_source,
    registered_targets,
)


class TestCorpus:
    def test_names_are_unique(self):
        names = [p.name for p in corpus()]
        assert len(names) == len(set(names))

    def test_lookup_by_name(self):
        assert corpus_program("fibonacci").entry == "fibonacci"
        with pytest.raises(KeyError):
            corpus_program("no_such_program")

    def test_inputs_match_entry_arity(self, compiled_corpus):
        rng = np.random.default_rng(0)
        for prog, cfg, _ in compiled_corpus:
            ins = prog.make_inputs(rng, 5)
            entry_fn = cfg.functions[cfg.entry]
            assert len(ins) == len(entry_fn.params)
            assert all(a.shape[0] == 5 for a in ins)

    def test_every_program_runs_on_both_engines(self, compiled_corpus):
        rng = np.random.default_rng(42)
        for prog, cfg, compiled in compiled_corpus:
            ins = prog.make_inputs(rng, 3)
            a = run_local(cfg, ins)
            b, _ = pc_vm.run(compiled, ins, depth=64)
            assert a.tobytes() == b.tobytes(), prog.name


class TestTargetRegistry:
    def test_same_name_returns_same_object(self):
        a = correlated_gaussian(2, 0.5)
        b = correlated_gaussian(2, 0.5)
        assert a is b

    def test_registry_lists_constructed_targets(self):
        t = correlated_gaussian(3, -0.2)
        assert t in registered_targets()

    def test_kernels_registered_once(self):
        t = correlated_gaussian(2, 0.5)
        assert known_kernel(t.logpdf) and known_kernel(t.grad)
        correlated_gaussian(2, 0.5)
        assert resolve_kernel(t.logpdf) is resolve_kernel(t.logpdf)

    def test_name_encodes_sign_and_permille(self):
        assert correlated_gaussian(2, 0.5).name == "g2p500"
        assert correlated_gaussian(3, -0.2).name == "g3m200"


class TestCorrelatedGaussian:
    def test_closed_form_moments(self):
        t = correlated_gaussian(2, 0.5)
        mean, cov = t.reference_moments()
        assert mean.tolist() == [0.0, 0.0]
        assert cov.tolist() == [[1.0, 0.5], [0.5, 1.0]]

    def test_invalid_rho_rejected(self):
        with pytest.raises(ValueError):
            correlated_gaussian(2, 1.0)
        with pytest.raises(ValueError):
            correlated_gaussian(3, -0.6)  # below -1/(k-1)
        with pytest.raises(ValueError):
            correlated_gaussian(0, 0.1)

    def test_logpdf_matches_quadrature_normalization(self):
        # integrate exp(logpdf) over a grid: should be close to 1
        t = correlated_gaussian(2, 0.5)
        kern = resolve_kernel(t.logpdf)
        xs = np.linspace(-6, 6, 201)
        gx, gy = np.meshgrid(xs, xs)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        vals = kern.fn((pts,), pts.shape[0])
        h = xs[1] - xs[0]
        assert np.exp(vals).sum() * h * h == pytest.approx(1.0, abs=1e-3)

    def test_grad_points_downhill(self):
        t = correlated_gaussian(2, 0.5)
        g = resolve_kernel(t.grad).fn((np.array([[1.0, 1.0]]),), 1)
        assert (g[0] < 0).all()


class TestLogisticRegression:
    def test_deterministic_by_seed(self):
        a = logistic_regression(40, 3, seed=9)
        b = logistic_regression(40, 3, seed=9)
        assert a is b
        assert a.name == "lr40x3s9"

    def test_validation(self):
        with pytest.raises(ValueError):
            logistic_regression(0, 3)
        with pytest.raises(ValueError):
            logistic_regression(10, 0)

    def test_reference_moments_sampled_and_cached(self):
        t = logistic_regression(30, 2, seed=5)
        mean, cov = t._moment_fn(walkers=16, sweeps=300, burn=100)
        assert mean.shape == (2,) and cov.shape == (2, 2)
        assert np.isfinite(mean).all() and np.isfinite(cov).all()
        assert cov[0, 0] > 0 and cov[1, 1] > 0

    def test_grad_matches_finite_differences(self):
        t = logistic_regression(25, 3, seed=2)
        lp = resolve_kernel(t.logpdf).fn
        gr = resolve_kernel(t.grad).fn
        w = np.array([[0.3, -0.1, 0.7]])
        g = gr((w,), 1)[0]
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (lp((w + e,), 1)[0] - lp((w - e,), 1)[0]) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-4)


class TestNutsConfig:
    def test_defaults(self):
        c = NutsConfig()
        assert (c.step_size, c.leaf_steps, c.max_depth, c.iterations) == (0.25, 4, 6, 400)

    @pytest.mark.parametrize("kw", [
        {"leaf_steps": 0}, {"max_depth": 0}, {"iterations": 0}, {"step_size": 0.0},
        {"step_size": -1.0},
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            NutsConfig(**kw)

    def test_min_stack_depth_covers_doubling(self):
        assert NutsConfig(max_depth=6).min_stack_depth == 10
        assert TINY_NUTS.min_stack_depth == 6


class TestSamplerGeneration:
    def test_source_is_deterministic(self):
        t = correlated_gaussian(2, 0.5)
        assert nuts_lite_source(TINY_NUTS, t) == nuts_lite_source(TINY_NUTS, t)

    def test_default_target_is_2d_half_correlated(self):
        assert nuts_lite_source(TINY_NUTS) == nuts_lite_source(
            TINY_NUTS, correlated_gaussian(2, 0.5))

    def test_source_compiles_for_other_targets(self):
        t = correlated_gaussian(3, -0.2)
        src = nuts_lite_source(TINY_NUTS, t)
        cfg = compile_source(src, "nuts_main")
        compiled = compile_program(cfg)
        assert any(v.startswith("build_tree.") for v in compiled.stacked)

    def test_constants_are_baked_in(self):
        src = nuts_lite_source(NutsConfig(step_size=0.125), correlated_gaussian(2, 0.5))
        assert "0.125" in src
        assert "grad_g2p500" in src and "logpdf_g2p500" in src

    def test_tiny_sampler_chain_shape_and_determinism(self):
        prog = corpus_program("nuts_lite")
        cfg = compile_source(prog.source, prog.entry)
        ins = prog.make_inputs(np.random.default_rng(7), 4)
        flat = run_local(cfg, ins)
        chain = chain_array(flat, TINY_NUTS, 2)
        assert chain.shape == (4, TINY_NUTS.iterations, 2)
        assert np.isfinite(chain).all()
        again = chain_array(run_local(cfg, ins), TINY_NUTS, 2)
        assert chain.tobytes() == again.tobytes()

    def test_lanes_evolve_independently(self):
        # same q0, different keys: chains must differ after iteration 1
        prog = corpus_program("nuts_lite")
        cfg = compile_source(prog.source, prog.entry)
        q0 = np.zeros((2, 2))
        keys = np.array([1, 2], dtype=np.int64)
        chain = chain_array(run_local(cfg, [q0, keys]), TINY_NUTS, 2)
        assert not np.array_equal(chain[0], chain[1])
