"""Two program forms shared by the whole pipeline.

CallGraphProgram: functions of basic blocks; ops are primitive applications
and direct calls; terminators are Jump/Branch/Return. This is what the
frontend emits and what the masked interpreter runs.

FlatProgram: a single merged block list with no Call ops. Data ops are
Push/Pop/Update against per-variable stacks, calls become PushJump
terminators, and Return pops the pc stack. This is what the stack-machine
engine runs.

Both forms have a canonical textual encoding (print_ir/parse_ir round-trips
bit-exactly) and structural validators that return human-readable
diagnostics instead of raising.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ParseError
from .runtime import known_kernel, resolve_kernel

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


@dataclass(frozen=True)
class PrimitiveId:
    name: str
    arity: int


def prim_id(name: str) -> PrimitiveId:
    """PrimitiveId for a registered kernel name (arity from the registry)."""
    return PrimitiveId(name, resolve_kernel(name).arity)


# ---- call-graph form -------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    output: str
    prim: PrimitiveId
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class Call:
    output: str
    callee: int  # function index
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class Jump:
    target: int


@dataclass(frozen=True)
class Branch:
    cond: str
    true_target: int
    false_target: int


@dataclass(frozen=True)
class Return:
    pass


Op = Primitive | Call
Terminator = Jump | Branch | Return


@dataclass(frozen=True)
class Block:
    ops: tuple[Op, ...]
    terminator: Terminator


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[str, ...]
    blocks: tuple[Block, ...]
    output: str


@dataclass(frozen=True)
class CallGraphProgram:
    functions: tuple[Function, ...]
    entry: int = 0

    def function_index(self, name: str) -> int:
        for i, f in enumerate(self.functions):
            if f.name == name:
                return i
        raise KeyError(name)


def successors(t: Terminator) -> tuple[int, ...]:
    if isinstance(t, Jump):
        return (t.target,)
    if isinstance(t, Branch):
        return (t.true_target, t.false_target)
    return ()


# ---- flat form -------------------------------------------------------------


@dataclass(frozen=True)
class Push:
    output: str
    prim: PrimitiveId
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class Pop:
    var: str


@dataclass(frozen=True)
class Update:
    output: str
    prim: PrimitiveId
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class FlatJump:
    target: int


@dataclass(frozen=True)
class FlatBranch:
    cond: str
    true_target: int
    false_target: int


@dataclass(frozen=True)
class PushJump:
    return_to: int
    jump_to: int


@dataclass(frozen=True)
class FlatReturn:
    pass


FlatOp = Push | Pop | Update
FlatTerminator = FlatJump | FlatBranch | PushJump | FlatReturn


@dataclass(frozen=True)
class FlatBlock:
    ops: tuple[FlatOp, ...]
    terminator: FlatTerminator


@dataclass(frozen=True)
class FlatProgram:
    blocks: tuple[FlatBlock, ...]
    inputs: tuple[str, ...]
    output: str
    entry: int = 0

    @property
    def halt_index(self) -> int:
        return len(self.blocks)


def flat_successors(t: FlatTerminator) -> tuple[int, ...]:
    """Static CFG edges; a PushJump flows both into the callee and (eventually)
    its own continuation, so both targets count."""
    if isinstance(t, FlatJump):
        return (t.target,)
    if isinstance(t, FlatBranch):
        return (t.true_target, t.false_target)
    if isinstance(t, PushJump):
        return (t.jump_to, t.return_to)
    return ()


# ---- validation ------------------------------------------------------------


def _check_prim(prim: PrimitiveId, n_inputs: int, where: str, out: list[str]):
    if not known_kernel(prim.name):
        out.append(f"{where}: unknown primitive '{prim.name}'")
        return
    arity = resolve_kernel(prim.name).arity
    if prim.arity != arity or n_inputs != arity:
        out.append(f"{where}: primitive '{prim.name}' wants {arity} inputs, got {n_inputs}")


def _must_assign(blocks, entry_assigned, uses_defs, succ_of, where, out):
    """Forward definite-assignment over one CFG; flags any use not covered on
    every path. uses_defs(block) yields (pos, uses, defs, note) per op slot."""
    n = len(blocks)
    preds: list[list[int]] = [[] for _ in range(n)]
    for i, b in enumerate(blocks):
        for s in succ_of(b.terminator):
            if 0 <= s < n:
                preds[s].append(i)
    universe = set(entry_assigned)
    for b in blocks:
        for _, uses, defs, _ in uses_defs(b):
            universe |= set(uses) | set(defs)
    ins = [set(universe) for _ in range(n)]
    ins[0] = set(entry_assigned)
    outs = [set(universe) for _ in range(n)]
    changed = True
    while changed:
        changed = False
        for i, b in enumerate(blocks):
            cur = set(entry_assigned) if i == 0 else (
                set.intersection(*(outs[p] for p in preds[i])) if preds[i] else set(universe)
            )
            if cur != ins[i]:
                ins[i] = cur
                changed = True
            acc = set(cur)
            for _, uses, defs, _ in uses_defs(b):
                acc |= set(defs)
            if acc != outs[i]:
                outs[i] = acc
                changed = True
    for i, b in enumerate(blocks):
        acc = set(ins[i])
        for pos, uses, defs, note in uses_defs(b):
            for u in uses:
                if u not in acc:
                    out.append(f"{where} block {i} {note} {pos}: use of unassigned variable '{u}'")
            acc |= set(defs)
    return ins, outs


def validate_callgraph(prog: CallGraphProgram) -> list[str]:
    """Structural diagnostics for the call-graph form; empty list means valid."""
    diags: list[str] = []
    names = [f.name for f in prog.functions]
    if not prog.functions:
        return ["program has no functions"]
    if len(set(names)) != len(names):
        diags.append("duplicate function names")
    if not 0 <= prog.entry < len(prog.functions):
        diags.append(f"entry index {prog.entry} out of range")
    for f in prog.functions:
        where = f"func '{f.name}'"
        if not _NAME_RE.match(f.name):
            diags.append(f"{where}: bad function name")
        if len(set(f.params)) != len(f.params):
            diags.append(f"{where}: duplicate parameters")
        for v in (*f.params, f.output):
            if not _NAME_RE.match(v):
                diags.append(f"{where}: bad variable name '{v}'")
        if not f.blocks:
            diags.append(f"{where}: no blocks")
            continue
        n = len(f.blocks)
        for bi, b in enumerate(f.blocks):
            bw = f"{where} block {bi}"
            for oi, op in enumerate(b.ops):
                ow = f"{bw} op {oi}"
                if isinstance(op, Primitive):
                    _check_prim(op.prim, len(op.inputs), ow, diags)
                    vars_here = (op.output, *op.inputs)
                elif isinstance(op, Call):
                    if not 0 <= op.callee < len(prog.functions):
                        diags.append(f"{ow}: callee index {op.callee} out of range")
                    else:
                        want = len(prog.functions[op.callee].params)
                        if len(op.args) != want:
                            diags.append(f"{ow}: callee '{prog.functions[op.callee].name}' wants {want} args, got {len(op.args)}")
                    vars_here = (op.output, *op.args)
                else:
                    diags.append(f"{ow}: unknown op kind {type(op).__name__}")
                    continue
                for v in vars_here:
                    if not _NAME_RE.match(v):
                        diags.append(f"{ow}: bad variable name '{v}'")
            t = b.terminator
            if isinstance(t, (Jump, Branch)):
                for s in successors(t):
                    if not 0 <= s < n:
                        diags.append(f"{bw}: terminator target {s} out of range")
            elif not isinstance(t, Return):
                diags.append(f"{bw}: unknown terminator {type(t).__name__}")
        if diags:
            continue  # skip dataflow on structurally broken functions

        def uses_defs(b):
            for pos, op in enumerate(b.ops):
                if isinstance(op, Primitive):
                    yield pos, op.inputs, (op.output,), "op"
                else:
                    yield pos, op.args, (op.output,), "op"
            t = b.terminator
            if isinstance(t, Branch):
                yield len(b.ops), (t.cond,), (), "terminator"
            elif isinstance(t, Return):
                yield len(b.ops), (f.output,), (), "return"

        _must_assign(f.blocks, f.params, uses_defs, successors, where, diags)
    return diags


def validate_flat(prog: FlatProgram, stack_vars: frozenset[str] | None = None) -> list[str]:
    """Structural diagnostics for the flat form. When the set of
    stack-carrying variables is known, Pop targets are checked against it."""
    diags: list[str] = []
    n = len(prog.blocks)
    if not prog.blocks:
        return ["flat program has no blocks"]
    if not 0 <= prog.entry < n:
        diags.append(f"entry index {prog.entry} out of range")
    for bi, b in enumerate(prog.blocks):
        bw = f"flat block {bi}"
        for oi, op in enumerate(b.ops):
            ow = f"{bw} op {oi}"
            if isinstance(op, (Push, Update)):
                _check_prim(op.prim, len(op.inputs), ow, diags)
            elif isinstance(op, Pop):
                if stack_vars is not None and op.var not in stack_vars:
                    diags.append(f"{ow}: pop of non-stack variable '{op.var}'")
            else:
                diags.append(f"{ow}: unknown op kind {type(op).__name__}")
        t = b.terminator
        if isinstance(t, (FlatJump, FlatBranch)):
            for s in flat_successors(t):
                if not 0 <= s < n:
                    diags.append(f"{bw}: terminator target {s} out of range")
        elif isinstance(t, PushJump):
            if not 0 <= t.jump_to < n:
                diags.append(f"{bw}: pushjump target {t.jump_to} out of range")
            if not 0 <= t.return_to <= n:  # halt index allowed as a return address
                diags.append(f"{bw}: pushjump return address {t.return_to} out of range")
        elif not isinstance(t, FlatReturn):
            diags.append(f"{bw}: unknown terminator {type(t).__name__}")
    return diags


# ---- textual form ----------------------------------------------------------


def _op_text(op) -> str:
    if isinstance(op, Primitive):
        return f"{op.output} = prim {op.prim.name}" + "".join(f" {x}" for x in op.inputs)
    if isinstance(op, Push):
        return f"push {op.output} = {op.prim.name}" + "".join(f" {x}" for x in op.inputs)
    if isinstance(op, Update):
        return f"update {op.output} = {op.prim.name}" + "".join(f" {x}" for x in op.inputs)
    if isinstance(op, Pop):
        return f"pop {op.var}"
    raise TypeError(type(op).__name__)


def _term_text(t) -> str:
    if isinstance(t, (Jump, FlatJump)):
        return f"jump {t.target}"
    if isinstance(t, (Branch, FlatBranch)):
        return f"branch {t.cond} {t.true_target} {t.false_target}"
    if isinstance(t, PushJump):
        return f"pushjump {t.jump_to} {t.return_to}"
    if isinstance(t, (Return, FlatReturn)):
        return "return"
    raise TypeError(type(t).__name__)


def print_ir(prog: CallGraphProgram | FlatProgram) -> str:
    """Canonical text for either program form; parse_ir inverts it exactly."""
    lines: list[str] = []
    if isinstance(prog, CallGraphProgram):
        lines.append("callgraph")
        lines.append(f"entry {prog.functions[prog.entry].name}")
        for f in prog.functions:
            lines.append(f"func {f.name}({', '.join(f.params)}) -> {f.output}")
            for bi, b in enumerate(f.blocks):
                lines.append(f"block {bi}:")
                for op in b.ops:
                    if isinstance(op, Call):
                        callee = prog.functions[op.callee].name
                        lines.append(f"    {op.output} = call {callee}" + "".join(f" {a}" for a in op.args))
                    else:
                        lines.append("    " + _op_text(op))
                lines.append("    " + _term_text(b.terminator))
    else:
        lines.append("flat")
        lines.append(f"entry {prog.entry}")
        lines.append("inputs" + "".join(f" {v}" for v in prog.inputs))
        lines.append(f"output {prog.output}")
        for bi, b in enumerate(prog.blocks):
            lines.append(f"block {bi}:")
            for op in b.ops:
                lines.append("    " + _op_text(op))
            lines.append("    " + _term_text(b.terminator))
    return "\n".join(lines) + "\n"


class _Lines:
    def __init__(self, text: str):
        self.items: list[tuple[int, list[str]]] = []
        for ln, raw in enumerate(text.splitlines(), start=1):
            body = raw.split("#", 1)[0].strip()
            if body:
                self.items.append((ln, body.split()))
        self.pos = 0

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else (None, None)

    def take(self):
        ln, toks = self.peek()
        if toks is None:
            raise ParseError("unexpected end of file")
        self.pos += 1
        return ln, toks


def _parse_int(tok: str, ln: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"expected integer, got '{tok}'", ln)


def _parse_flat_body(lines: _Lines):
    blocks: list[FlatBlock] = []
    ops: list = []
    index = None

    def close(term, ln):
        nonlocal ops, index
        if index is None:
            raise ParseError("terminator outside a block", ln)
        blocks.append(FlatBlock(tuple(ops), term))
        ops, index = [], None

    while True:
        ln, toks = lines.peek()
        if toks is None:
            break
        lines.take()
        if toks[0] == "block":
            if index is not None:
                raise ParseError("block without terminator", ln)
            idx = _parse_int(toks[1].rstrip(":"), ln)
            if idx != len(blocks):
                raise ParseError(f"block header {idx} out of order (expected {len(blocks)})", ln)
            index = idx
        elif toks[0] == "push" or toks[0] == "update":
            if len(toks) < 4 or toks[2] != "=":
                raise ParseError(f"malformed {toks[0]} op", ln)
            cls = Push if toks[0] == "push" else Update
            ops.append(cls(toks[1], PrimitiveId(toks[3], len(toks) - 4), tuple(toks[4:])))
        elif toks[0] == "pop":
            if len(toks) != 2:
                raise ParseError("malformed pop", ln)
            ops.append(Pop(toks[1]))
        elif toks[0] == "jump":
            close(FlatJump(_parse_int(toks[1], ln)), ln)
        elif toks[0] == "branch":
            close(FlatBranch(toks[1], _parse_int(toks[2], ln), _parse_int(toks[3], ln)), ln)
        elif toks[0] == "pushjump":
            close(PushJump(jump_to=_parse_int(toks[1], ln), return_to=_parse_int(toks[2], ln)), ln)
        elif toks[0] == "return":
            close(FlatReturn(), ln)
        else:
            raise ParseError(f"unexpected token '{toks[0]}'", ln)
    if index is not None:
        raise ParseError("last block has no terminator")
    return tuple(blocks)


_FUNC_RE = re.compile(r"func\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(([^)]*)\)\s*->\s*([A-Za-z_][A-Za-z0-9_]*)\Z")


def parse_ir(text: str) -> CallGraphProgram | FlatProgram:
    """Parse canonical IR text (either form) back into dataclasses."""
    lines = _Lines(text)
    ln, toks = lines.take()
    if toks == ["flat"]:
        ln, toks = lines.take()
        if toks[0] != "entry":
            raise ParseError("flat program needs an entry line", ln)
        entry = _parse_int(toks[1], ln)
        ln, toks = lines.take()
        if toks[0] != "inputs":
            raise ParseError("flat program needs an inputs line", ln)
        inputs = tuple(toks[1:])
        ln, toks = lines.take()
        if toks[0] != "output" or len(toks) != 2:
            raise ParseError("flat program needs an output line", ln)
        output = toks[1]
        blocks = _parse_flat_body(lines)
        return FlatProgram(blocks, inputs, output, entry)
    if toks != ["callgraph"]:
        raise ParseError("program must start with 'callgraph' or 'flat'", ln)
    ln, toks = lines.take()
    if toks[0] != "entry" or len(toks) != 2:
        raise ParseError("callgraph needs an entry line", ln)
    entry_name = toks[1]

    # first pass over the remaining lines: function headers (names for calls)
    headers = []
    for l, t in lines.items[lines.pos:]:
        if t[0] == "func":
            m = _FUNC_RE.match(" ".join(t))
            if not m:
                raise ParseError("malformed func header", l)
            params = tuple(p.strip() for p in m.group(2).split(",")) if m.group(2).strip() else ()
            headers.append((m.group(1), params, m.group(3)))
    fn_index = {name: i for i, (name, _, _) in enumerate(headers)}
    if len(fn_index) != len(headers):
        raise ParseError("duplicate function names")

    functions: list[Function] = []
    cur: list[Block] | None = None
    ops: list = []
    in_block = False

    def close_function(ln):
        nonlocal cur, ops, in_block
        if cur is None:
            return
        if in_block:
            raise ParseError("function ends inside an unterminated block", ln)
        name, params, output = headers[len(functions)]
        functions.append(Function(name, params, tuple(cur), output))
        cur, ops, in_block = None, [], False

    def close_block(term, ln):
        nonlocal ops, in_block
        if cur is None or not in_block:
            raise ParseError("terminator outside a block", ln)
        cur.append(Block(tuple(ops), term))
        ops = []
        in_block = False

    while True:
        ln, toks = lines.peek()
        if toks is None:
            break
        lines.take()
        if toks[0] == "func":
            close_function(ln)
            cur = []
        elif toks[0] == "block":
            if cur is None:
                raise ParseError("block outside a function", ln)
            if in_block:
                raise ParseError("block without terminator", ln)
            idx = _parse_int(toks[1].rstrip(":"), ln)
            if idx != len(cur):
                raise ParseError(f"block header {idx} out of order (expected {len(cur)})", ln)
            in_block = True
        elif toks[0] == "jump":
            close_block(Jump(_parse_int(toks[1], ln)), ln)
        elif toks[0] == "branch":
            close_block(Branch(toks[1], _parse_int(toks[2], ln), _parse_int(toks[3], ln)), ln)
        elif toks[0] == "return":
            close_block(Return(), ln)
        elif len(toks) >= 3 and toks[1] == "=":
            if not in_block:
                raise ParseError("op outside a block", ln)
            if toks[2] == "prim":
                if len(toks) < 4:
                    raise ParseError("malformed prim op", ln)
                ops.append(Primitive(toks[0], PrimitiveId(toks[3], len(toks) - 4), tuple(toks[4:])))
            elif toks[2] == "call":
                if len(toks) < 4:
                    raise ParseError("malformed call op", ln)
                callee = toks[3]
                if callee not in fn_index:
                    raise ParseError(f"call to unknown function '{callee}'", ln)
                ops.append(Call(toks[0], fn_index[callee], tuple(toks[4:])))
            else:
                raise ParseError(f"unknown op form '{toks[2]}'", ln)
        else:
            raise ParseError(f"unexpected token '{toks[0]}'", ln)
    close_function(None)
    if len(functions) != len(headers):
        raise ParseError("function body count does not match headers")
    if entry_name not in fn_index:
        raise ParseError(f"entry function '{entry_name}' not defined")
    return CallGraphProgram(tuple(functions), fn_index[entry_name])
