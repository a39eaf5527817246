"""Lowering from the call-graph form to the flat stack-machine form.

The pipeline is: split blocks so calls are terminal, flatten every function
into one merged block list with an explicit per-variable stack discipline,
cancel adjacent pop/push pairs into in-place updates, classify variables by
how far their values must survive, then erase the stack plumbing for
variables that never needed it.

The stack discipline per activation is balance-by-construction:

* assignment        pop v; push v = f(xs)       (replaces the top slot)
* caller save       push v = id v               (duplicate, one per live var)
* argument pass     pop G.p; push G.p = id t    (args staged through temps)
* result copy       pop y; push y = id G.ret    (first thing after return)
* restore           pop v                       (one per saved var, after)

Every variable therefore owns exactly one slot per live activation that
needed it, and the depth of any stack is bounded by the call depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import ir
from .errors import LoweringError


@dataclass(frozen=True)
class CompileOptions:
    """Pass toggles. All True is the real compiler; anything off is a
    pessimization that must not change observable results."""

    caller_saves: bool = True  # off: save every caller variable at every call
    temp_elim: bool = True     # off: block-local temporaries get stacks too
    stack_elim: bool = True    # off: registerizable variables get stacks too
    cancel: bool = True        # off: keep raw pop/push pairs (no updates)


@dataclass(frozen=True)
class LoweringMap:
    """Where every flat block and variable came from in the source program.

    blocks[i] is (function, local label) for flat block i; variables maps
    each flat name to (function, source-level name, storage class).
    """

    blocks: tuple[tuple[str, str], ...]
    variables: dict[str, tuple[str, str, str]]


@dataclass(frozen=True)
class CompiledProgram:
    flat: ir.FlatProgram
    classes: dict[str, str]          # var -> 'stacked' | 'register' | 'temporary'
    labels: tuple[str, ...]          # flat block index -> readable label
    options: CompileOptions
    stages: dict[str, str]           # per-stage printed IR
    lowering: LoweringMap | None = None

    @property
    def stacked(self) -> frozenset[str]:
        return frozenset(v for v, c in self.classes.items() if c == "stacked")

    @property
    def registers(self) -> frozenset[str]:
        return frozenset(v for v, c in self.classes.items() if c == "register")

    @property
    def temporaries(self) -> frozenset[str]:
        return frozenset(v for v, c in self.classes.items() if c == "temporary")


# ---- normalization ---------------------------------------------------------


def split_calls(prog: ir.CallGraphProgram) -> ir.CallGraphProgram:
    """Rewrite every function so each Call is the last op of its block and is
    followed by a Jump to its continuation block."""
    functions = []
    for fn in prog.functions:
        blocks = [(list(b.ops), b.terminator) for b in fn.blocks]
        i = 0
        while i < len(blocks):
            ops, term = blocks[i]
            cut = next(
                (j for j, op in enumerate(ops)
                 if isinstance(op, ir.Call)
                 and not (j == len(ops) - 1 and isinstance(term, ir.Jump))),
                None,
            )
            if cut is None:
                i += 1
                continue
            cont = len(blocks)
            blocks.append((ops[cut + 1:], term))
            blocks[i] = (ops[: cut + 1], ir.Jump(cont))
        functions.append(replace(fn, blocks=tuple(
            ir.Block(tuple(ops), term) for ops, term in blocks)))
    return replace(prog, functions=tuple(functions))


# ---- liveness --------------------------------------------------------------


def _solve_liveness(n: int, succs, uses_defs):
    """Backward worklist dataflow. uses_defs(b) -> ordered [(uses, defs)] per op,
    terminator last. Returns per-block live-in sets."""
    live_in = [set() for _ in range(n)]
    work = list(range(n))
    while work:
        b = work.pop()
        live = set()
        for s in succs(b):
            live |= live_in[s]
        for uses, defs in reversed(uses_defs(b)):
            live -= defs
            live |= uses
        if live != live_in[b]:
            live_in[b] = live
            work.extend(p for p in range(n) if b in succs(p))
    return live_in


def _callgraph_live_in(fn: ir.Function) -> list[set[str]]:
    def succs(b):
        return ir.successors(fn.blocks[b].terminator)

    def uses_defs(b):
        rows = []
        for op in fn.blocks[b].ops:
            if isinstance(op, ir.Primitive):
                rows.append((set(op.inputs), {op.output}))
            else:
                rows.append((set(op.args), {op.output}))
        t = fn.blocks[b].terminator
        if isinstance(t, ir.Branch):
            rows.append(({t.cond}, set()))
        elif isinstance(t, ir.Return):
            rows.append(({fn.output}, set()))
        return rows

    return _solve_liveness(len(fn.blocks), succs, uses_defs)


def _flat_live_in(flat: ir.FlatProgram) -> list[set[str]]:
    def succs(b):
        return ir.flat_successors(flat.blocks[b].terminator)

    def uses_defs(b):
        rows = []
        for op in flat.blocks[b].ops:
            if isinstance(op, ir.Pop):
                # a pop both consumes the top and exposes the saved slot
                rows.append(({op.var}, {op.var}))
            else:
                rows.append((set(op.inputs), {op.output}))
        t = flat.blocks[b].terminator
        if isinstance(t, ir.FlatBranch):
            rows.append(({t.cond}, set()))
        return rows

    return _solve_liveness(len(flat.blocks), succs, uses_defs)


# ---- flattening ------------------------------------------------------------


class _Flattener:
    def __init__(self, prog: ir.CallGraphProgram, caller_saves: bool):
        self.prog = split_calls(prog)
        self.caller_saves = caller_saves
        self.n_fresh = 0
        # block layout: per function, original blocks then its landing pads
        self.offsets = []
        self.landings: list[list] = []  # per function: landing payloads
        total = 0
        self.live_in = []
        self.preds = []
        for fn in self.prog.functions:
            self.offsets.append(total)
            self.live_in.append(_callgraph_live_in(fn))
            pred_count = [0] * len(fn.blocks)
            for b in fn.blocks:
                for s in ir.successors(b.terminator):
                    pred_count[s] += 1
            self.preds.append(pred_count)
            n_land = sum(
                1
                for b in fn.blocks
                if b.ops and isinstance(b.ops[-1], ir.Call)
                and pred_count[b.terminator.target] > 1
            )
            total += len(fn.blocks) + n_land
        self.total = total

    def fresh(self, fname: str, tag: str) -> str:
        name = f"{fname}.${tag}{self.n_fresh}"
        self.n_fresh += 1
        return name

    def var(self, fidx: int, v: str) -> str:
        return f"{self.prog.functions[fidx].name}.{v}"

    def flat_index(self, fidx: int, bidx: int) -> int:
        return self.offsets[fidx] + bidx

    def assign(self, out: str, prim: ir.PrimitiveId, ins: tuple[str, ...], fname: str):
        """Replace out's top with prim(ins); route through a temp if the op
        reads its own output, since the pop would expose a stale slot."""
        if out in ins:
            t = self.fresh(fname, "t")
            return [
                ir.Push(t, prim, ins),
                ir.Pop(out),
                ir.Push(out, ir.PrimitiveId("id", 1), (t,)),
                ir.Pop(t),
            ]
        return [ir.Pop(out), ir.Push(out, prim, ins)]

    def run(self) -> tuple[ir.FlatProgram, tuple[str, ...]]:
        bodies: dict[int, list] = {}
        prefixes: dict[int, list] = {}
        terms: dict[int, object] = {}
        labels: dict[int, str] = {}
        land_payload: dict[int, tuple[list, int]] = {}

        for fidx, fn in enumerate(self.prog.functions):
            fname = fn.name
            fvars = set(fn.params) | {
                op.output for b in fn.blocks for op in b.ops
            } | {fn.output}
            next_land = self.offsets[fidx] + len(fn.blocks)
            for bidx, block in enumerate(fn.blocks):
                fi = self.flat_index(fidx, bidx)
                labels[fi] = f"{fname}.b{bidx}"
                ops: list[ir.FlatOp] = []
                body_ops = block.ops
                call = None
                if body_ops and isinstance(body_ops[-1], ir.Call):
                    call = body_ops[-1]
                    body_ops = body_ops[:-1]
                for op in body_ops:
                    assert isinstance(op, ir.Primitive)
                    ops += self.assign(
                        self.var(fidx, op.output), op.prim,
                        tuple(self.var(fidx, a) for a in op.inputs), fname)

                if call is not None:
                    cont = block.terminator.target
                    callee = self.prog.functions[call.callee]
                    if self.caller_saves:
                        live = self.live_in[fidx][cont]
                        save = sorted(live - {call.output})
                    else:
                        save = sorted(fvars - {call.output})
                    # stage arguments before params change (self-calls alias)
                    temps = []
                    for a in call.args:
                        t = self.fresh(fname, "a")
                        temps.append(t)
                        ops.append(ir.Push(t, ir.PrimitiveId("id", 1),
                                           (self.var(fidx, a),)))
                    for v in save:
                        fv = self.var(fidx, v)
                        ops.append(ir.Push(fv, ir.PrimitiveId("id", 1), (fv,)))
                    for p, t in zip(callee.params, temps):
                        gp = f"{callee.name}.{p}"
                        ops.append(ir.Pop(gp))
                        ops.append(ir.Push(gp, ir.PrimitiveId("id", 1), (t,)))
                    for t in reversed(temps):
                        ops.append(ir.Pop(t))

                    ret_ops = self.assign(
                        self.var(fidx, call.output), ir.PrimitiveId("id", 1),
                        (f"{callee.name}.{callee.output}",), fname)
                    ret_ops += [ir.Pop(self.var(fidx, v)) for v in save]

                    cont_fi = self.flat_index(fidx, cont)
                    if self.preds[fidx][cont] > 1:
                        land = next_land
                        next_land += 1
                        labels[land] = f"{fname}.r{land - self.offsets[fidx]}"
                        land_payload[land] = (ret_ops, cont_fi)
                        return_to = land
                    else:
                        prefixes.setdefault(cont_fi, []).extend(ret_ops)
                        return_to = cont_fi
                    bodies[fi] = ops
                    terms[fi] = ir.PushJump(
                        return_to=return_to,
                        jump_to=self.flat_index(call.callee, 0))
                    continue

                t = block.terminator
                if isinstance(t, ir.Jump):
                    ft = ir.FlatJump(self.flat_index(fidx, t.target))
                elif isinstance(t, ir.Branch):
                    ft = ir.FlatBranch(self.var(fidx, t.cond),
                                       self.flat_index(fidx, t.true_target),
                                       self.flat_index(fidx, t.false_target))
                else:
                    ft = ir.FlatReturn()
                bodies[fi] = ops
                terms[fi] = ft

        blocks = []
        for i in range(self.total):
            if i in land_payload:
                ret_ops, cont_fi = land_payload[i]
                blocks.append(ir.FlatBlock(tuple(ret_ops), ir.FlatJump(cont_fi)))
            else:
                ops = prefixes.get(i, []) + bodies[i]
                blocks.append(ir.FlatBlock(tuple(ops), terms[i]))

        entry_fn = self.prog.functions[self.prog.entry]
        flat = ir.FlatProgram(
            blocks=tuple(blocks),
            inputs=tuple(f"{entry_fn.name}.{p}" for p in entry_fn.params),
            output=f"{entry_fn.name}.{entry_fn.output}",
            entry=self.flat_index(self.prog.entry, 0),
        )
        label_list = tuple(labels[i] for i in range(self.total))
        return flat, label_list


def flatten(prog: ir.CallGraphProgram, *, caller_saves: bool = True):
    """Merge all functions into one flat block list with explicit stack ops.

    Returns (FlatProgram, labels). Every continuation with a single
    predecessor is absorbed into its target block, so a call/return costs no
    extra scheduling steps; shared continuations get a landing block.
    """
    diags = ir.validate_callgraph(prog)
    if diags:
        raise LoweringError("; ".join(diags))
    return _Flattener(prog, caller_saves).run()


# ---- pop/push cancellation --------------------------------------------------


def cancel_pop_push(flat: ir.FlatProgram) -> ir.FlatProgram:
    """Fuse `pop v ... push v = f(xs)` into `update v = f(xs)` when nothing in
    between touches v and f does not read v. The scan crosses a FlatJump edge
    only when the target has a unique predecessor; Branch, PushJump and Return
    are barriers. Idempotent.
    """
    n = len(flat.blocks)
    pred_count = [0] * n
    for b in flat.blocks:
        for s in ir.flat_successors(b.terminator):
            pred_count[s] += 1

    kill_pops: set[tuple[int, int]] = set()
    to_update: set[tuple[int, int]] = set()

    def scan(bi: int, oi: int, var: str, visited: set[int]) -> tuple[int, int] | None:
        ops = flat.blocks[bi].ops
        j = oi
        while True:
            if j >= len(ops):
                t = flat.blocks[bi].terminator
                if isinstance(t, ir.FlatBranch) and t.cond == var:
                    return None
                if isinstance(t, ir.FlatJump) and pred_count[t.target] == 1 \
                        and t.target not in visited:
                    visited.add(t.target)
                    bi, ops, j = t.target, flat.blocks[t.target].ops, 0
                    continue
                return None
            op = ops[j]
            if isinstance(op, ir.Pop):
                if op.var == var:
                    return None
            else:
                if isinstance(op, ir.Push) and op.output == var:
                    if var in op.inputs:
                        return None
                    return (bi, j)
                if var in op.inputs or op.output == var:
                    return None
            j += 1

    for bi, block in enumerate(flat.blocks):
        for oi, op in enumerate(block.ops):
            if isinstance(op, ir.Pop) and (bi, oi) not in kill_pops:
                hit = scan(bi, oi + 1, op.var, {bi})
                if hit is not None and hit not in to_update:
                    kill_pops.add((bi, oi))
                    to_update.add(hit)

    new_blocks = []
    for bi, block in enumerate(flat.blocks):
        ops = []
        for oi, op in enumerate(block.ops):
            if (bi, oi) in kill_pops:
                continue
            if (bi, oi) in to_update:
                ops.append(ir.Update(op.output, op.prim, op.inputs))
            else:
                ops.append(op)
        new_blocks.append(ir.FlatBlock(tuple(ops), block.terminator))
    return replace(flat, blocks=tuple(new_blocks))


# ---- classification and declassing -----------------------------------------


def _reachable_from(flat: ir.FlatProgram, start: int) -> set[int]:
    seen = {start}
    work = [start]
    while work:
        for s in ir.flat_successors(flat.blocks[work.pop()].terminator):
            if s not in seen:
                seen.add(s)
                work.append(s)
    return seen


def classify_variables(flat: ir.FlatProgram) -> dict[str, str]:
    """Decide how much storage each variable really needs.

    temporary: never live at any block boundary (scratch, written whole).
    register: boundary-live but never carried across a call that can reach
      recursion (one masked slot per lane).
    stacked: live across a PushJump from which some cyclic call chain is
      reachable, so a second activation could clobber the slot; needs a
      real stack.

    Program inputs and the output always get at least a register so lanes
    that finish early keep their values.
    """
    all_vars = set(flat.inputs) | {flat.output}
    for b in flat.blocks:
        for op in b.ops:
            if isinstance(op, ir.Pop):
                all_vars.add(op.var)
            else:
                all_vars.add(op.output)
                all_vars.update(op.inputs)
        if isinstance(b.terminator, ir.FlatBranch):
            all_vars.add(b.terminator.cond)

    live_in = _flat_live_in(flat)
    boundary = set(flat.inputs) | {flat.output}
    for s in live_in:
        boundary |= s

    reach_cache: dict[int, set[int]] = {}

    def reach(start: int) -> set[int]:
        if start not in reach_cache:
            reach_cache[start] = _reachable_from(flat, start)
        return reach_cache[start]

    # a pushjump sits on a cycle when the call it makes can come back to it
    cyclic_pj = {
        bi for bi, b in enumerate(flat.blocks)
        if isinstance(b.terminator, ir.PushJump) and bi in reach(b.terminator.jump_to)
    }

    stacked: set[str] = set()
    for bi, b in enumerate(flat.blocks):
        t = b.terminator
        if not isinstance(t, ir.PushJump):
            continue
        if cyclic_pj & reach(t.jump_to):  # this call can enter recursion
            stacked |= live_in[t.return_to] & boundary

    classes = {}
    for v in all_vars:
        if v in stacked:
            classes[v] = "stacked"
        elif v in boundary:
            classes[v] = "register"
        else:
            classes[v] = "temporary"
    return classes


def declass(flat: ir.FlatProgram, classes: dict[str, str]) -> ir.FlatProgram:
    """Strip stack plumbing from variables that did not earn a stack.

    For non-stacked vars: pops vanish, self-copies vanish, and pushes become
    plain updates (a register or scratch write).
    """
    new_blocks = []
    for block in flat.blocks:
        ops = []
        for op in block.ops:
            if isinstance(op, ir.Pop):
                if classes.get(op.var) == "stacked":
                    ops.append(op)
                continue
            if classes.get(op.output) == "stacked":
                ops.append(op)
                continue
            if isinstance(op, ir.Push) and op.prim.name == "id" \
                    and op.inputs == (op.output,):
                continue  # self-duplicate of a plain slot: no-op
            ops.append(ir.Update(op.output, op.prim, op.inputs))
        new_blocks.append(ir.FlatBlock(tuple(ops), block.terminator))
    return replace(flat, blocks=tuple(new_blocks))


# ---- driver ------------------------------------------------------------------


def compile_program(
    prog: ir.CallGraphProgram,
    options: CompileOptions = CompileOptions(),
) -> CompiledProgram:
    """Full pipeline: flatten, cancel, classify, declass."""
    flat, labels = flatten(prog, caller_saves=options.caller_saves)
    stages = {"flatten": ir.print_ir(flat)}
    if options.cancel:
        flat = cancel_pop_push(flat)
        stages["cancel"] = ir.print_ir(flat)
    classes = classify_variables(flat)
    if not options.temp_elim:
        classes = {v: ("stacked" if c == "temporary" else c) for v, c in classes.items()}
    if not options.stack_elim:
        classes = {v: ("stacked" if c == "register" else c) for v, c in classes.items()}
    flat = declass(flat, classes)
    stages["declass"] = ir.print_ir(flat)
    diags = ir.validate_flat(flat, stack_vars={v for v, c in classes.items() if c == "stacked"})
    if diags:
        raise LoweringError("; ".join(diags))
    lowering = LoweringMap(
        blocks=tuple(tuple(lbl.split(".", 1)) for lbl in labels),
        variables={
            v: (v.split(".", 1)[0], v.split(".", 1)[-1], c)
            for v, c in classes.items()
        },
    )
    return CompiledProgram(flat=flat, classes=classes, labels=labels,
                           options=options, stages=stages, lowering=lowering)


compile = compile_program
