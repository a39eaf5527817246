"""Batched execution of a call-graph program by masked block scheduling.

One activation of one function runs as a single batched frame: every lane
holds its own block cursor, each step picks the populated block with the
lowest index (or asks a caller-supplied chooser), and runs its ops under a
lane mask. Call ops recurse on the host stack with the current mask, so
recursion depth lives in Python while data stays batched.

Lanes that entered the callee dead keep junk in their slots; callers must
mask them out, and do.
"""

from __future__ import annotations

import sys
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import ir
from .errors import HostRecursionLimit, StepLimitExceeded
from .metrics import ScheduleTrace
from .runtime import BatchArray, LaneMask, apply_kernel, batch, resolve_kernel


@dataclass
class _Ctx:
    prog: ir.CallGraphProgram
    z: int
    mode: str
    max_steps: int | None
    max_depth: int
    chooser: object
    trace: ScheduleTrace | None
    steps: int = 0

    def bump(self) -> None:
        self.steps += 1
        if self.max_steps is not None and self.steps > self.max_steps:
            raise StepLimitExceeded(self.max_steps)


def _min_pc_chooser(pc: np.ndarray, candidates: LaneMask) -> LaneMask:
    """Default schedule: every lane sitting at the lowest populated block."""
    return candidates & (pc == pc[candidates].min())


def _store(env: dict, name: str, result: BatchArray, mask: LaneMask) -> None:
    """Commit result's masked lanes into env[name], materializing on first write."""
    dest = env.get(name)
    if dest is None:
        dest = np.zeros_like(result)
        env[name] = dest
    elif dest.dtype != result.dtype or dest.shape != result.shape:
        raise TypeError(
            f"variable '{name}' written as {result.dtype}{result.shape[1:]} "
            f"but holds {dest.dtype}{dest.shape[1:]}"
        )
    dest[mask] = result[mask]


def _exec_prim(op: ir.Primitive, env: dict, mask: LaneMask, ctx: _Ctx) -> None:
    kernel = resolve_kernel(op.prim.name)
    ins = tuple(env[a] for a in op.inputs)
    if ctx.mode == "gather":
        packed = tuple(a[mask] for a in ins)
        res = apply_kernel(kernel, packed, int(mask.sum()))
        dest = env.get(op.output)
        if dest is None:
            dest = np.zeros((ctx.z,) + res.shape[1:], dtype=res.dtype)
            env[op.output] = dest
        elif dest.dtype != res.dtype or dest.shape[1:] != res.shape[1:]:
            raise TypeError(f"variable '{op.output}' changes type across writes")
        dest[mask] = res
    else:
        full = apply_kernel(kernel, ins, ctx.z)
        _store(env, op.output, full, mask)


def _call(ctx: _Ctx, fidx: int, args: tuple, live: LaneMask, depth: int) -> BatchArray:
    if depth > ctx.max_depth:
        raise HostRecursionLimit(ctx.max_depth)
    fn = ctx.prog.functions[fidx]
    halt = len(fn.blocks)
    env: dict[str, BatchArray] = {p: a.copy() for p, a in zip(fn.params, args)}
    pc = np.where(live, 0, halt).astype(np.int64)

    while True:
        candidates = pc < halt
        if not candidates.any():
            break
        sel = np.asarray(ctx.chooser(pc, candidates), dtype=bool)
        if not sel.any() or (sel & ~candidates).any():
            raise ValueError("chooser must return a nonempty subset of active lanes")
        b = int(pc[sel][0])
        if not (pc[sel] == b).all():
            raise ValueError("chooser selected lanes at different blocks")
        ctx.bump()
        block = fn.blocks[b]
        if ctx.trace is not None:
            counts = Counter(
                op.prim.name for op in block.ops if isinstance(op, ir.Primitive)
            )
            ctx.trace.record(f"{fn.name}.{b}", int(sel.sum()), counts)

        for op in block.ops:
            if isinstance(op, ir.Primitive):
                _exec_prim(op, env, sel, ctx)
            else:
                callee_args = tuple(env[a] for a in op.args)
                ret = _call(ctx, op.callee, callee_args, sel, depth + 1)
                _store(env, op.output, ret, sel)

        t = block.terminator
        if isinstance(t, ir.Jump):
            pc[sel] = t.target
        elif isinstance(t, ir.Branch):
            cond = env[t.cond]
            pc[sel] = np.where(cond[sel], t.true_target, t.false_target)
        else:
            pc[sel] = halt

    out = env.get(fn.output)
    if out is None:
        # no live lane ever returned a value (empty call); type unknown
        out = np.zeros(ctx.z, dtype=np.int64)
    return out


DEFAULT_MAX_STEPS = 1_000_000
DEFAULT_MAX_DEPTH = 10_000


def _ensure_host_stack(max_depth: int) -> None:
    """Raise the interpreter recursion limit enough to host max_depth calls."""
    want = 3 * max_depth + 200
    if sys.getrecursionlimit() < want:
        sys.setrecursionlimit(want)


def run_local(
    prog: ir.CallGraphProgram,
    inputs,
    *,
    mode: str = "masked",
    max_steps: int | None = DEFAULT_MAX_STEPS,
    max_depth: int = DEFAULT_MAX_DEPTH,
    chooser=None,
    trace: ScheduleTrace | None = None,
) -> BatchArray:
    """Run all lanes of a batch through the entry function.

    inputs: one z-wide array per entry parameter. mode 'masked' computes on
    full width and discards junk lanes; 'gather' packs active lanes before
    the kernel and scatters after. Both give bitwise identical results.
    max_steps counts batched block executions (None for no limit); max_depth
    bounds host-stack recursion.
    """
    if mode not in ("masked", "gather"):
        raise ValueError(f"unknown mode '{mode}'")
    _ensure_host_stack(max_depth)
    entry = prog.functions[prog.entry]
    arrays = [a if isinstance(a, np.ndarray) else batch(a) for a in inputs]
    if len(arrays) != len(entry.params):
        raise ValueError(f"entry wants {len(entry.params)} inputs, got {len(arrays)}")
    if not arrays:
        raise ValueError("entry function must take at least one input")
    z = arrays[0].shape[0]
    for a in arrays:
        if a.shape[0] != z:
            raise ValueError("all inputs must share the batch width")
    if z < 1:
        raise ValueError("batch width must be at least 1")
    ctx = _Ctx(
        prog=prog,
        z=z,
        mode=mode,
        max_steps=max_steps,
        max_depth=max_depth,
        chooser=chooser or _min_pc_chooser,
        trace=trace,
    )
    live = np.ones(z, dtype=bool)
    return _call(ctx, prog.entry, tuple(arrays), live, 0)


def trace_local(prog: ir.CallGraphProgram, inputs, **kwargs):
    """run_local plus the schedule it executed."""
    arrays = [a if isinstance(a, np.ndarray) else batch(a) for a in inputs]
    tr = ScheduleTrace(engine="local", z=arrays[0].shape[0] if arrays else 0)
    out = run_local(prog, arrays, trace=tr, **kwargs)
    return out, tr


def run_scalar_reference(
    prog: ir.CallGraphProgram,
    args,
    max_steps: int | None = DEFAULT_MAX_STEPS,
    max_depth: int = DEFAULT_MAX_DEPTH,
):
    """Single-lane direct walk of the CFG, no masking anywhere.

    An independent execution path used to cross-check the batched engines.
    """
    _ensure_host_stack(max_depth)
    steps = [0]

    def call(fidx: int, argvals, depth: int):
        if depth > t_depth:
            raise HostRecursionLimit(t_depth)
        fn = prog.functions[fidx]
        env = {p: a.copy() for p, a in zip(fn.params, argvals)}
        b = 0
        while True:
            steps[0] += 1
            if max_steps is not None and steps[0] > max_steps:
                raise StepLimitExceeded(max_steps)
            block = fn.blocks[b]
            for op in block.ops:
                if isinstance(op, ir.Primitive):
                    ins = tuple(env[a] for a in op.inputs)
                    env[op.output] = apply_kernel(resolve_kernel(op.prim.name), ins, 1)
                else:
                    env[op.output] = call(op.callee, [env[a] for a in op.args], depth + 1)
            t = block.terminator
            if isinstance(t, ir.Jump):
                b = t.target
            elif isinstance(t, ir.Branch):
                b = t.true_target if bool(env[t.cond][0]) else t.false_target
            else:
                return env[fn.output]

    t_depth = max_depth
    prepped = [a if isinstance(a, np.ndarray) else batch([a]) for a in args]
    return call(prog.entry, prepped, 0)
