"""Flat stack-machine engine: one batched step loop, zero host recursion.

Every lane carries a program-counter stack plus one stack, register, or
scratch slot per variable (as classified by the compiler). Each step picks
the lowest populated block among non-halted lanes, runs its ops under that
lane mask, and applies the terminator:

* jump      overwrite the pc top
* branch    overwrite the pc top per lane
* pushjump  overwrite the pc top with the return block, then push the callee
* return    pop the pc

A lane is done when its pc top equals the halt index (one past the last
block); the pc stack is seeded with the halt index at the bottom so the
final return lands there.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ir
from .compiler import CompiledProgram
from .errors import StackFault, StepLimitExceeded, TypeInferenceError
from .metrics import ScheduleTrace
from .runtime import (
    BOOL,
    BatchArray,
    I64,
    StackedVar,
    VType,
    apply_kernel,
    batch,
    read_top,
    resolve_kernel,
    stack_pop,
    stack_push,
    vtype_of,
    write_top,
)


# ---- type and shape inference ------------------------------------------------


def infer_types(flat: ir.FlatProgram, input_types: list[VType]) -> dict[str, VType]:
    """Forward fixpoint over the flat ops, seeded by the input batches.

    Every write site must agree on one type per variable; branch conditions
    must be boolean. Variables whose writes are unreachable from any typed
    value default to i64 (they are dead).
    """
    if len(input_types) != len(flat.inputs):
        raise TypeInferenceError(
            f"program wants {len(flat.inputs)} inputs, got {len(input_types)}")
    types: dict[str, VType] = dict(zip(flat.inputs, input_types))

    def note(var: str, vt: VType) -> bool:
        old = types.get(var)
        if old is None:
            types[var] = vt
            return True
        if old != vt:
            raise TypeInferenceError(
                f"variable '{var}' is both {old} and {vt}")
        return False

    changed = True
    while changed:
        changed = False
        for block in flat.blocks:
            for op in block.ops:
                if isinstance(op, ir.Pop):
                    continue
                ins = [types.get(v) for v in op.inputs]
                if any(t is None for t in ins):
                    continue
                kernel = resolve_kernel(op.prim.name)
                try:
                    out_vt = kernel.type_rule(tuple(ins))
                except ValueError as e:
                    raise TypeInferenceError(
                        f"'{op.prim.name}' on {tuple(map(str, ins))}: {e}") from None
                if note(op.output, out_vt):
                    changed = True

    for block in flat.blocks:
        t = block.terminator
        if isinstance(t, ir.FlatBranch):
            cvt = types.get(t.cond)
            if cvt is not None and cvt != BOOL:
                raise TypeInferenceError(
                    f"branch condition '{t.cond}' has type {cvt}, wants bool")
    return types


# ---- machine state -----------------------------------------------------------


@dataclass
class Machine:
    flat: ir.FlatProgram
    classes: dict[str, str]
    labels: tuple[str, ...]
    z: int
    depth: int
    mode: str
    types: dict[str, VType]
    stacks: dict[str, StackedVar]
    regs: dict[str, BatchArray]
    scratch: dict[str, BatchArray]
    pc: StackedVar
    steps: int = 0
    trace: ScheduleTrace | None = None
    _executors: list = field(default_factory=list, repr=False)
    _block_prims: list = field(default_factory=list, repr=False)

    @property
    def halt_index(self) -> int:
        return self.flat.halt_index

    def value_of(self, var: str) -> BatchArray:
        c = self.classes[var]
        if c == "stacked":
            return read_top(self.stacks[var])
        if c == "register":
            return self.regs[var]
        return self.scratch[var]

    def active_mask(self) -> np.ndarray:
        return read_top(self.pc) != self.halt_index

    def output_value(self) -> BatchArray:
        return self.value_of(self.flat.output).copy()


def init_machine(
    compiled: CompiledProgram,
    inputs,
    *,
    depth: int,
    mode: str = "masked",
    trace: ScheduleTrace | None = None,
) -> Machine:
    """Allocate all storage and seed the batch.

    Data stacks get `depth` slots and start with one zeroed slot so the first
    in-place write of any activation has somewhere to land; entry parameters
    start with the input batch in that slot. The pc stack gets depth+1 slots
    seeded [halt, entry].
    """
    if mode not in ("masked", "gather"):
        raise ValueError(f"unknown mode '{mode}'")
    if depth < 1:
        raise ValueError("stack depth must be at least 1")
    flat = compiled.flat
    arrays = [a if isinstance(a, np.ndarray) else batch(a) for a in inputs]
    if len(arrays) != len(flat.inputs):
        raise ValueError(f"program wants {len(flat.inputs)} inputs, got {len(arrays)}")
    if not arrays:
        raise ValueError("program must take at least one input")
    z = arrays[0].shape[0]
    for a in arrays:
        if a.shape[0] != z:
            raise ValueError("all inputs must share the batch width")
    if z < 1:
        raise ValueError("batch width must be at least 1")

    types = infer_types(flat, [vtype_of(a) for a in arrays])
    classes = compiled.classes
    stacks: dict[str, StackedVar] = {}
    regs: dict[str, BatchArray] = {}
    scratch: dict[str, BatchArray] = {}
    for var, cls in classes.items():
        vt = types.get(var, I64)
        if cls == "stacked":
            sv = StackedVar(var, depth, z, vt)
            sv.pointers[:] = 1  # one live slot per lane from the start
            stacks[var] = sv
        elif cls == "register":
            regs[var] = np.zeros((z,) + vt.lane_shape, dtype=vt.dtype)
        else:
            scratch[var] = np.zeros((z,) + vt.lane_shape, dtype=vt.dtype)

    for var, arr in zip(flat.inputs, arrays):
        cls = classes[var]
        if cls == "stacked":
            sv = stacks[var]
            sv.data[0] = arr
            sv.cached_top[:] = arr
        elif cls == "register":
            regs[var][:] = arr
        else:
            scratch[var][:] = arr

    pc = StackedVar("$pc", depth + 1, z, I64)
    pc.data[0] = flat.halt_index
    pc.data[1] = flat.entry
    pc.pointers[:] = 2
    pc.cached_top[:] = flat.entry

    m = Machine(flat=flat, classes=classes, labels=compiled.labels, z=z,
                depth=depth, mode=mode, types=types, stacks=stacks, regs=regs,
                scratch=scratch, pc=pc, trace=trace)
    m._executors = [_compile_block(m, b) for b in flat.blocks]
    m._block_prims = [
        dict(Counter(op.prim.name for op in b.ops if not isinstance(op, ir.Pop)))
        for b in flat.blocks
    ]
    return m


# ---- block execution ----------------------------------------------------------


def _compile_block(m: Machine, block: ir.FlatBlock):
    """Turn a block into a list of closures over the machine's storage."""
    steps = []

    def note(var: str, kind: str) -> None:
        if m.trace is not None:
            m.trace.record_stack_op(var, kind)

    for op in block.ops:
        if isinstance(op, ir.Pop):
            sv = m.stacks[op.var]

            def run_pop(sel, sv=sv):
                note(sv.name, "pop")
                stack_pop(sv, sel)

            steps.append(run_pop)
            continue
        kernel = resolve_kernel(op.prim.name)
        ins = op.inputs
        out = op.output
        cls = m.classes[out]
        is_push = isinstance(op, ir.Push)

        def compute(sel, kernel=kernel, ins=ins):
            vals = tuple(m.value_of(v) for v in ins)
            if m.mode == "gather":
                packed = tuple(v[sel] for v in vals)
                return apply_kernel(kernel, packed, int(sel.sum())), True
            return apply_kernel(kernel, vals, m.z), False

        if cls == "stacked":
            sv = m.stacks[out]
            if is_push:
                def run(sel, sv=sv, compute=compute):
                    res, packed = compute(sel)
                    if packed:
                        full = np.zeros((m.z,) + res.shape[1:], dtype=res.dtype)
                        full[sel] = res
                        res = full
                    note(sv.name, "push")
                    stack_push(sv, res, sel)
            else:
                def run(sel, sv=sv, compute=compute):
                    res, packed = compute(sel)
                    if packed:
                        full = np.zeros((m.z,) + res.shape[1:], dtype=res.dtype)
                        full[sel] = res
                        res = full
                    note(sv.name, "update")
                    write_top(sv, res, sel)
        elif cls == "register":
            dest = m.regs[out]
            def run(sel, dest=dest, compute=compute):
                res, packed = compute(sel)
                dest[sel] = res if packed else res[sel]
        else:
            dest = m.scratch[out]
            def run(sel, dest=dest, compute=compute):
                res, packed = compute(sel)
                if packed:
                    dest[sel] = res
                else:
                    dest[:] = res
        steps.append(run)

    t = block.terminator
    if isinstance(t, ir.FlatJump):
        def term(sel, t=t):
            write_top(m.pc, np.full(m.z, t.target, dtype=np.int64), sel)
    elif isinstance(t, ir.FlatBranch):
        def term(sel, t=t):
            cond = m.value_of(t.cond)
            tgt = np.where(cond, t.true_target, t.false_target).astype(np.int64)
            write_top(m.pc, tgt, sel)
    elif isinstance(t, ir.PushJump):
        def term(sel, t=t):
            write_top(m.pc, np.full(m.z, t.return_to, dtype=np.int64), sel)
            stack_push(m.pc, np.full(m.z, t.jump_to, dtype=np.int64), sel)
    else:
        def term(sel):
            stack_pop(m.pc, sel)
    return steps, term


def step(m: Machine, *, observer=None, debug: bool = False) -> bool:
    """Execute one batched block; returns False once every lane has halted."""
    tops = read_top(m.pc)
    active = tops != m.halt_index
    if not active.any():
        return False
    b = int(tops[active].min())
    sel = active & (tops == b)
    if m.trace is not None:
        m.trace.record(m.labels[b], int(sel.sum()), m._block_prims[b])
    ops, term = m._executors[b]
    try:
        for run in ops:
            run(sel)
        term(sel)
    except StackFault as e:
        e.block = m.labels[b]
        raise
    m.steps += 1
    if observer is not None:
        observer(m, b, sel)
    if debug:
        check_coherence(m)
        new_tops = read_top(m.pc)
        if (new_tops[~active] != m.halt_index).any():
            raise AssertionError("halted lane resumed execution")
        if ((new_tops < 0) | (new_tops > m.halt_index)).any():
            raise AssertionError("pc top left the block range")
    return True


DEFAULT_MAX_STEPS = 1_000_000


def run_vm(
    m: Machine,
    *,
    max_steps: int | None = DEFAULT_MAX_STEPS,
    observer=None,
    debug: bool = False,
) -> BatchArray:
    """Step until every lane halts; returns the output batch."""
    while step(m, observer=observer, debug=debug):
        if max_steps is not None and m.steps >= max_steps and m.active_mask().any():
            raise StepLimitExceeded(max_steps)
    return m.output_value()


def run_flat(
    compiled: CompiledProgram,
    inputs,
    *,
    depth: int,
    mode: str = "masked",
    max_steps: int | None = DEFAULT_MAX_STEPS,
    trace: ScheduleTrace | None = None,
    observer=None,
    debug: bool = False,
) -> BatchArray:
    """Convenience: init_machine + run_vm."""
    m = init_machine(compiled, inputs, depth=depth, mode=mode, trace=trace)
    return run_vm(m, max_steps=max_steps, observer=observer, debug=debug)


def run(
    compiled: CompiledProgram,
    inputs,
    *,
    depth: int,
    mode: str = "masked",
    max_steps: int | None = DEFAULT_MAX_STEPS,
    observer=None,
    debug: bool = False,
):
    """Execute a compiled program and return (outputs, trace)."""
    arrays = [a if isinstance(a, np.ndarray) else batch(a) for a in inputs]
    tr = ScheduleTrace(engine="pc", z=arrays[0].shape[0] if arrays else 0)
    m = init_machine(compiled, arrays, depth=depth, mode=mode, trace=tr)
    out = run_vm(m, max_steps=max_steps, observer=observer, debug=debug)
    return out, tr


def trace_flat(compiled: CompiledProgram, inputs, *, depth: int, **kwargs):
    """run plus keyword passthrough; returns (outputs, trace)."""
    return run(compiled, inputs, depth=depth, **kwargs)


def check_coherence(m: Machine) -> None:
    """Debug invariant: every cached stack top matches its backing slot."""
    for sv in list(m.stacks.values()) + [m.pc]:
        live = sv.pointers >= 1
        if not live.any():
            continue
        lanes = np.flatnonzero(live)
        slots = sv.data[sv.pointers[lanes] - 1, lanes]
        if not np.array_equal(slots, sv.cached_top[lanes]):
            raise AssertionError(f"stale cached top on stack '{sv.name}'")
