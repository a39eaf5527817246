"""Command-line front door: compile, run, check, nuts.

Programs are named either by a corpus entry (fibonacci, countdown, ...) or by
a path to a source file. All output is deterministic for a fixed seed; floats
print with 17 significant digits so runs can be diffed byte for byte.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys

import numpy as np

from . import ir, local_exec, metrics, pc_vm, workloads
from .compiler import CompileOptions, compile_program
from .errors import LockstepError, StackFault, StepLimitExceeded
from .frontend import compile_source
from .metrics import ScheduleTrace

PASS_NAMES = ("caller-saves", "temp-elim", "stack-elim", "cancel")


def _options_without(disabled: list[str]) -> CompileOptions:
    unknown = set(disabled) - set(PASS_NAMES)
    if unknown:
        raise ValueError(
            f"unknown pass name(s) {sorted(unknown)}; choose from {list(PASS_NAMES)}")
    return CompileOptions(
        caller_saves="caller-saves" not in disabled,
        temp_elim="temp-elim" not in disabled,
        stack_elim="stack-elim" not in disabled,
        cancel="cancel" not in disabled,
    )


def _load_program(name: str, entry: str | None):
    """A corpus name, or a path to a source file."""
    try:
        cand = workloads.corpus_program(name)
    except KeyError:
        cand = None
    if cand is not None:
        return compile_source(cand.source, entry or cand.entry), cand
    if not os.path.exists(name):
        raise ValueError(f"'{name}' is neither a corpus program nor a file")
    with open(name) as fh:
        src = fh.read()
    return compile_source(src, entry), None


def _parse_scalar(text: str):
    t = text.strip()
    if t in ("true", "false"):
        return np.bool_(t == "true")
    try:
        return np.int64(int(t))
    except ValueError:
        return np.float64(float(t))


def _parse_inputs(args, n_params: int) -> list[np.ndarray]:
    """--inputs lane,lane,... where a lane is val or val:val:... per param;
    --inputs-file is JSON: a list of lanes, each a list of per-param values
    (numbers, or lists of numbers for vector parameters)."""
    if args.inputs_file:
        with open(args.inputs_file) as fh:
            lanes = json.load(fh)
        if not isinstance(lanes, list) or not lanes:
            raise ValueError("inputs file must hold a nonempty JSON list of lanes")
        rows = [lane if isinstance(lane, list) else [lane] for lane in lanes]
    elif args.inputs:
        rows = [[_parse_scalar(v) for v in lane.split(":")]
                for lane in args.inputs.split(",")]
    else:
        raise ValueError("provide --inputs or --inputs-file")
    if any(len(r) != n_params for r in rows):
        raise ValueError(f"every lane needs {n_params} value(s)")
    cols = []
    for p in range(n_params):
        col = [np.asarray(r[p]) for r in rows]
        cols.append(np.stack(col))
    return cols


def _fmt(v) -> str:
    if isinstance(v, (np.bool_, bool)):
        return "true" if v else "false"
    if isinstance(v, (np.floating, float)):
        return format(float(v), ".17g")
    return str(int(v))


def _print_outputs(out: np.ndarray) -> None:
    if out.ndim == 1:
        print(" ".join(_fmt(v) for v in out))
    else:
        for lane in out:
            print(" ".join(_fmt(v) for v in lane))


def _write_trace_files(tr: ScheduleTrace, args) -> None:
    if getattr(args, "trace", None):
        metrics.export_trace(tr, args.trace)
    if getattr(args, "csv", None):
        with open(args.csv, "w") as fh:
            fh.write(metrics.trace_to_csv(tr))


# ---- subcommands ---------------------------------------------------------------


def cmd_compile(args) -> int:
    prog, _ = _load_program(args.program, args.entry)
    options = _options_without(args.no_pass)
    print("== call-graph ir ==")
    print(ir.print_ir(prog), end="")
    cp = compile_program(prog, options)
    for stage, text in cp.stages.items():
        print(f"== flat ir after {stage} ==")
        print(text, end="")
    print("== variable classes ==")
    width = max(len(v) for v in cp.classes)
    for var in sorted(cp.classes):
        print(f"{var:<{width}}  {cp.classes[var]}")
    return 0


def cmd_run(args) -> int:
    prog, _ = _load_program(args.program, args.entry)
    n_params = len(prog.functions[prog.entry].params)
    inputs = _parse_inputs(args, n_params)
    z = inputs[0].shape[0]
    tr = ScheduleTrace(engine=args.engine, z=z)
    if args.engine == "local":
        out = local_exec.run_local(prog, inputs, mode=args.mode,
                                   max_steps=args.max_steps, trace=tr)
    else:
        cp = compile_program(prog, _options_without(args.no_pass))
        m = pc_vm.init_machine(cp, inputs, depth=args.depth, mode=args.mode, trace=tr)
        out = pc_vm.run_vm(m, max_steps=args.max_steps)
    _print_outputs(out)
    _write_trace_files(tr, args)
    return 0


def _check_one(prog, corpus_entry, z_values, batches, seed, exhaustive, mode) -> list[str]:
    """Differential run of one program; returns mismatch descriptions."""
    rng = np.random.default_rng(seed)
    combos = (list(itertools.product([True, False], repeat=4))
              if exhaustive else [(True, True, True, True)])
    compiled = {
        c: compile_program(prog, CompileOptions(*c))
        for c in combos
    }
    problems = []
    for b in range(batches):
        z = z_values[b % len(z_values)]
        inputs = corpus_entry.make_inputs(rng, z)
        ref = np.stack([
            local_exec.run_scalar_reference(prog, [a[i:i + 1] for a in inputs])[0]
            for i in range(z)
        ])
        runs = [("local", local_exec.run_local(prog, inputs, mode=mode))]
        combo = combos[b % len(combos)]
        depth = 48
        runs.append((f"pc{''.join('+' if f else '-' for f in combo)}",
                     pc_vm.run_flat(compiled[combo], inputs, depth=depth, mode=mode)))
        for engine, out in runs:
            if out.dtype == np.float64:
                bad = ~np.isclose(out, ref, rtol=1e-12, atol=0.0)
            else:
                bad = out != ref
            bad = np.asarray(bad)
            while bad.ndim > 1:
                bad = bad.any(axis=-1)
            if bad.any():
                lane = int(np.flatnonzero(bad)[0])
                problems.append(
                    f"batch {b} engine {engine} lane {lane}: "
                    f"got {out[lane]!r}, reference {ref[lane]!r} "
                    f"(inputs {[a[lane].tolist() for a in inputs]})")
    return problems


def cmd_check(args) -> int:
    programs = (workloads.corpus() if args.program == "all"
                else [workloads.corpus_program(args.program)])
    z_values = (1, 2, 4, 7, 32)
    failures = 0
    for entry in programs:
        prog = compile_source(entry.source, entry.entry)
        problems = _check_one(prog, entry, z_values, args.batches,
                              args.seed, args.exhaustive, args.mode)
        status = "ok" if not problems else "MISMATCH"
        print(f"{entry.name}: {status} ({args.batches} batches)")
        for p in problems:
            print(f"  {p}")
        failures += len(problems)
    return 1 if failures else 0


def cmd_nuts(args) -> int:
    config = workloads.NutsConfig(
        step_size=args.step_size, leaf_steps=args.leaf_steps,
        max_depth=args.tree_depth, iterations=args.iterations, seed=args.seed)
    target = workloads.correlated_gaussian(args.dim, args.rho)
    src = workloads.nuts_lite_source(config, target)
    prog = compile_source(src, "nuts_main")
    cp = compile_program(prog, _options_without(args.no_pass))

    rng = np.random.default_rng(config.seed)
    q0 = np.zeros((args.z, target.dim))
    key = rng.integers(0, 2**31, size=args.z).astype(np.int64)

    local_tr = ScheduleTrace(engine="local", z=args.z)
    local_out = local_exec.run_local(prog, [q0, key],
                                     max_steps=args.max_steps, trace=local_tr)
    pc_tr = ScheduleTrace(engine="pc", z=args.z)
    m = pc_vm.init_machine(cp, [q0, key], depth=args.depth, trace=pc_tr)
    pc_out = pc_vm.run_vm(m, max_steps=args.max_steps)

    identical = local_out.tobytes() == pc_out.tobytes()
    chains = workloads.chain_array(pc_out, config, target.dim)
    pooled = chains.reshape(-1, target.dim)
    mean, cov = target.reference_moments()
    mean_err = float(np.abs(pooled.mean(axis=0) - mean).max())
    cov_err = float(np.abs(np.cov(pooled.T).reshape(target.dim, target.dim) - cov).max())
    counted = {target.grad}
    report = metrics.compare(local_tr, pc_tr, counted)

    print(f"lanes {args.z}, iterations {config.iterations}, dim {target.dim}")
    print(f"engines bit-identical: {'yes' if identical else 'NO'}")
    print(f"max abs mean error {_fmt(np.float64(mean_err))}")
    print(f"max abs cov error {_fmt(np.float64(cov_err))}")
    u_local, u_pc = report["utilization"]
    print(f"gradient utilization local {_fmt(np.float64(u_local))}")
    print(f"gradient utilization pc {_fmt(np.float64(u_pc))}")
    print(f"utilization ratio {_fmt(np.float64(report['ratio']))}")
    if args.trace:
        metrics.export_trace(pc_tr, args.trace)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("engine,steps,grad_invocations,utilization\n")
            for tr, u in ((local_tr, u_local), (pc_tr, u_pc)):
                fh.write(f"{tr.engine},{tr.step_count},"
                         f"{tr.invocations(counted)},{format(u, '.17g')}\n")
    return 0 if identical else 1


# ---- argument plumbing -----------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, engine: bool = True) -> None:
    if engine:
        p.add_argument("--engine", choices=("local", "pc"), default="pc")
    p.add_argument("--mode", choices=("mask", "gather"), default="mask")
    p.add_argument("--depth", type=int, default=64,
                   help="per-lane stack depth (pc engine only)")
    p.add_argument("--max-steps", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pass", action="append", default=[], metavar="NAME",
                   help=f"disable a compiler pass; one of {', '.join(PASS_NAMES)}")
    p.add_argument("--trace", metavar="PATH", help="write the schedule trace as JSON")
    p.add_argument("--csv", metavar="PATH", help="write a CSV summary")
    p.add_argument("--entry", help="entry function (defaults to the first one)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lockstep",
        description="Compile and run batched recursive programs on two engines.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="print every IR stage and the class table")
    p.add_argument("program", help="corpus name or source path")
    _add_common(p, engine=False)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("run", help="execute a program on a batch of inputs")
    p.add_argument("program", help="corpus name or source path")
    p.add_argument("--inputs", help="comma-separated lanes; ':' separates parameters")
    p.add_argument("--inputs-file", help="JSON list of lanes")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("check", help="differential test against the scalar oracle")
    p.add_argument("program", nargs="?", default="all",
                   help="corpus name, or 'all' (default)")
    p.add_argument("--batches", type=int, default=6)
    p.add_argument("--exhaustive", action="store_true",
                   help="cycle through every compiler pass subset")
    _add_common(p, engine=False)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("nuts", help="run the generated sampler on both engines")
    p.add_argument("--z", type=int, default=64, help="batch width")
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--step-size", type=float, default=0.25)
    p.add_argument("--leaf-steps", type=int, default=4)
    p.add_argument("--tree-depth", type=int, default=6,
                   help="doubling cap per trajectory")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--rho", type=float, default=0.5)
    _add_common(p, engine=False)
    p.set_defaults(fn=cmd_nuts)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "mode", None) == "mask":
        args.mode = "masked"
    try:
        return args.fn(args)
    except StackFault as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StepLimitExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (LockstepError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
