"""Tiny source language: parser, reference evaluator, and CFG lowering.

The language is deliberately small: function definitions, assignments,
if/else, while, return; expressions over + - * / <= < == and or not,
literals, user-function calls, and registered primitives called by name
(sin, exp, rng_uniform, dot, vslice:0:2, ...). Boolean and/or lower to
Branch terminators, so control flow in the IR is exactly what the batching
engines have to schedule.

eval_ast walks the AST directly (per lane, host recursion, no blocks at
all); it is the semantic yardstick the lowered CFG is tested against.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import ir
from .errors import LoweringError, ParseError
from .runtime import apply_kernel, batch, known_kernel, resolve_kernel

# ---- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: object  # python bool, int, or float
    line: int = 0


@dataclass(frozen=True)
class Var:
    name: str
    line: int = 0


@dataclass(frozen=True)
class PrimCall:
    name: str
    args: tuple
    line: int = 0


@dataclass(frozen=True)
class FuncCall:
    name: str
    args: tuple
    line: int = 0


@dataclass(frozen=True)
class BoolOp:
    kind: str  # 'and' | 'or'
    left: object
    right: object
    line: int = 0


@dataclass(frozen=True)
class Assign:
    name: str
    expr: object
    line: int = 0


@dataclass(frozen=True)
class If:
    cond: object
    then: tuple
    orelse: tuple
    line: int = 0


@dataclass(frozen=True)
class While:
    cond: object
    body: tuple
    line: int = 0


@dataclass(frozen=True)
class ReturnStmt:
    expr: object
    line: int = 0


@dataclass(frozen=True)
class FuncDef:
    name: str
    params: tuple[str, ...]
    body: tuple
    line: int = 0


@dataclass(frozen=True)
class Module:
    functions: tuple[FuncDef, ...]

    def get(self, name: str) -> FuncDef:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)


# ---- lexer -----------------------------------------------------------------

_KEYWORDS = {"def", "if", "else", "while", "return", "and", "or", "not", "true", "false"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<num>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?::\d+)*)
  | (?P<op><=|==|[-+*/<=(){},;])
""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # 'num' | 'name' | 'kw' | 'op' | 'eof'
    text: str
    line: int


def _lex(src: str) -> list[_Tok]:
    toks = []
    line = 1
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if not m:
            raise ParseError(f"unexpected character {src[pos]!r}", line)
        kind = m.lastgroup
        text = m.group()
        if kind == "ws" or kind == "comment":
            line += text.count("\n")
        elif kind == "name" and text in _KEYWORDS:
            toks.append(_Tok("kw", text, line))
        else:
            toks.append(_Tok(kind, text, line))
        pos = m.end()
    toks.append(_Tok("eof", "", line))
    return toks


# ---- parser ----------------------------------------------------------------


class _Parser:
    def __init__(self, toks: list[_Tok]):
        self.toks = toks
        self.pos = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.pos]

    def advance(self) -> _Tok:
        t = self.cur
        self.pos += 1
        return t

    def expect(self, kind: str, text: str | None = None) -> _Tok:
        t = self.cur
        if t.kind != kind or (text is not None and t.text != text):
            want = text or kind
            raise ParseError(f"expected {want!r}, got {t.text!r}", t.line)
        return self.advance()

    def at(self, kind: str, text: str | None = None) -> bool:
        return self.cur.kind == kind and (text is None or self.cur.text == text)

    def module(self) -> Module:
        funcs = []
        while not self.at("eof"):
            funcs.append(self.fundef())
        if not funcs:
            raise ParseError("empty module")
        names = [f.name for f in funcs]
        if len(set(names)) != len(names):
            raise ParseError("duplicate function definition")
        return Module(tuple(funcs))

    def fundef(self) -> FuncDef:
        line = self.expect("kw", "def").line
        name = self.expect("name").text
        self.expect("op", "(")
        params = []
        if not self.at("op", ")"):
            params.append(self.expect("name").text)
            while self.at("op", ","):
                self.advance()
                params.append(self.expect("name").text)
        self.expect("op", ")")
        body = self.block()
        if len(set(params)) != len(params):
            raise ParseError(f"duplicate parameter in '{name}'", line)
        return FuncDef(name, tuple(params), body, line)

    def block(self) -> tuple:
        self.expect("op", "{")
        stmts = []
        while not self.at("op", "}"):
            stmts.append(self.statement())
        self.expect("op", "}")
        return tuple(stmts)

    def statement(self):
        t = self.cur
        if t.kind == "kw" and t.text == "return":
            self.advance()
            e = self.expr()
            self.expect("op", ";")
            return ReturnStmt(e, t.line)
        if t.kind == "kw" and t.text == "if":
            self.advance()
            self.expect("op", "(")
            cond = self.expr()
            self.expect("op", ")")
            then = self.block()
            orelse: tuple = ()
            if self.at("kw", "else"):
                self.advance()
                orelse = self.block()
            return If(cond, then, orelse, t.line)
        if t.kind == "kw" and t.text == "while":
            self.advance()
            self.expect("op", "(")
            cond = self.expr()
            self.expect("op", ")")
            body = self.block()
            return While(cond, body, t.line)
        if t.kind == "name":
            name = self.advance().text
            self.expect("op", "=")
            e = self.expr()
            self.expect("op", ";")
            return Assign(name, e, t.line)
        raise ParseError(f"expected statement, got {t.text!r}", t.line)

    def expr(self):
        return self.or_expr()

    def or_expr(self):
        e = self.and_expr()
        while self.at("kw", "or"):
            line = self.advance().line
            e = BoolOp("or", e, self.and_expr(), line)
        return e

    def and_expr(self):
        e = self.not_expr()
        while self.at("kw", "and"):
            line = self.advance().line
            e = BoolOp("and", e, self.not_expr(), line)
        return e

    def not_expr(self):
        if self.at("kw", "not"):
            line = self.advance().line
            return PrimCall("not", (self.not_expr(),), line)
        return self.comparison()

    _CMP = {"<=": "le", "<": "lt", "==": "eq"}

    def comparison(self):
        e = self.additive()
        if self.cur.kind == "op" and self.cur.text in self._CMP:
            t = self.advance()
            e = PrimCall(self._CMP[t.text], (e, self.additive()), t.line)
        return e

    _ADD = {"+": "add", "-": "sub"}
    _MUL = {"*": "mul", "/": "div"}

    def additive(self):
        e = self.multiplicative()
        while self.cur.kind == "op" and self.cur.text in self._ADD:
            t = self.advance()
            e = PrimCall(self._ADD[t.text], (e, self.multiplicative()), t.line)
        return e

    def multiplicative(self):
        e = self.primary()
        while self.cur.kind == "op" and self.cur.text in self._MUL:
            t = self.advance()
            e = PrimCall(self._MUL[t.text], (e, self.primary()), t.line)
        return e

    def primary(self):
        t = self.cur
        if t.kind == "num":
            self.advance()
            if "." in t.text or "e" in t.text or "E" in t.text:
                return Lit(float(t.text), t.line)
            return Lit(int(t.text), t.line)
        if t.kind == "kw" and t.text in ("true", "false"):
            self.advance()
            return Lit(t.text == "true", t.line)
        if t.kind == "name":
            self.advance()
            if self.at("op", "("):
                self.advance()
                args = []
                if not self.at("op", ")"):
                    args.append(self.expr())
                    while self.at("op", ","):
                        self.advance()
                        args.append(self.expr())
                self.expect("op", ")")
                return FuncCall(t.text, tuple(args), t.line)
            return Var(t.text, t.line)
        if t.kind == "op" and t.text == "(":
            self.advance()
            e = self.expr()
            self.expect("op", ")")
            return e
        raise ParseError(f"expected expression, got {t.text!r}", t.line)


def parse_source(src: str) -> Module:
    """Parse source text into an AST module."""
    return _Parser(_lex(src)).module()


# ---- AST reference evaluator -----------------------------------------------


class _ReturnValue(Exception):
    def __init__(self, value):
        self.value = value


def _eval_expr(e, env, module: Module):
    if isinstance(e, Lit):
        k = resolve_kernel(_const_name(e.value))
        return apply_kernel(k, (), 1)
    if isinstance(e, Var):
        if e.name not in env:
            raise LoweringError(f"use of unassigned variable '{e.name}' at line {e.line}")
        return env[e.name]
    if isinstance(e, BoolOp):
        left = _eval_expr(e.left, env, module)
        if e.kind == "and" and not bool(left[0]):
            return left
        if e.kind == "or" and bool(left[0]):
            return left
        return _eval_expr(e.right, env, module)
    if isinstance(e, PrimCall):
        args = tuple(_eval_expr(a, env, module) for a in e.args)
        return apply_kernel(resolve_kernel(e.name), args, 1)
    if isinstance(e, FuncCall):
        args = [_eval_expr(a, env, module) for a in e.args]
        if any(f.name == e.name for f in module.functions):
            return _eval_function(module, e.name, args)
        if known_kernel(e.name):
            return apply_kernel(resolve_kernel(e.name), tuple(args), 1)
        raise LoweringError(f"call to undefined function '{e.name}' at line {e.line}")
    raise TypeError(type(e).__name__)


def _exec_stmts(stmts, env, module):
    for s in stmts:
        if isinstance(s, Assign):
            env[s.name] = _eval_expr(s.expr, env, module)
        elif isinstance(s, If):
            if bool(_eval_expr(s.cond, env, module)[0]):
                _exec_stmts(s.then, env, module)
            else:
                _exec_stmts(s.orelse, env, module)
        elif isinstance(s, While):
            while bool(_eval_expr(s.cond, env, module)[0]):
                _exec_stmts(s.body, env, module)
        elif isinstance(s, ReturnStmt):
            raise _ReturnValue(_eval_expr(s.expr, env, module))
        else:
            raise TypeError(type(s).__name__)


def _eval_function(module: Module, name: str, args):
    f = module.get(name)
    if len(args) != len(f.params):
        raise LoweringError(f"'{name}' wants {len(f.params)} args, got {len(args)}")
    env = dict(zip(f.params, args))
    try:
        _exec_stmts(f.body, env, module)
    except _ReturnValue as r:
        return r.value
    raise LoweringError(f"'{name}' fell off the end without returning")


def eval_ast(module: Module, entry: str, args):
    """Direct AST-walking evaluation of one activation (single lane).

    args are python scalars or 1-lane arrays; returns a 1-lane array.
    """
    prepped = [a if hasattr(a, "dtype") else batch([a]) for a in args]
    return _eval_function(module, entry, prepped)


# ---- lowering to the call-graph IR -----------------------------------------

_RESERVED = re.compile(r"(_t\d+|_ret)\Z")
_OUTPUT_VAR = "_ret"


class _FnLowerer:
    def __init__(self, fdef: FuncDef, fn_index: dict[str, int], module: Module):
        self.fdef = fdef
        self.fn_index = fn_index
        self.module = module
        self.blocks: list[tuple[list, object]] = []  # (ops, terminator|None)
        self.cur = self.new_block()
        self.n_temps = 0

    def new_block(self) -> int:
        self.blocks.append(([], None))
        return len(self.blocks) - 1

    def emit(self, op):
        ops, term = self.blocks[self.cur]
        assert term is None
        ops.append(op)

    def terminate(self, term, next_block: int | None = None):
        ops, old = self.blocks[self.cur]
        assert old is None, "block already terminated"
        self.blocks[self.cur] = (ops, term)
        if next_block is not None:
            self.cur = next_block

    def temp(self) -> str:
        name = f"_t{self.n_temps}"
        self.n_temps += 1
        return name

    def lower_expr(self, e, dest: str | None = None) -> str:
        """Emit ops computing e; returns the variable holding the value."""
        if isinstance(e, Var):
            if dest is None or dest == e.name:
                return e.name
            self.emit(ir.Primitive(dest, ir.prim_id("id"), (e.name,)))
            return dest
        out = dest or self.temp()
        if isinstance(e, Lit):
            self.emit(ir.Primitive(out, ir.prim_id(_const_name(e.value))))
            return out
        if isinstance(e, PrimCall):
            if not known_kernel(e.name) or e.name.startswith("const:"):
                raise LoweringError(f"unknown primitive '{e.name}' at line {e.line}")
            k = resolve_kernel(e.name)
            if len(e.args) != k.arity:
                raise LoweringError(f"primitive '{e.name}' wants {k.arity} args at line {e.line}")
            args = tuple(self.lower_expr(a) for a in e.args)
            self.emit(ir.Primitive(out, ir.PrimitiveId(e.name, k.arity), args))
            return out
        if isinstance(e, FuncCall):
            if e.name not in self.fn_index:
                # not a user function: try the primitive namespace
                if known_kernel(e.name) and not e.name.startswith("const:"):
                    return self.lower_expr(PrimCall(e.name, e.args, e.line), dest)
                raise LoweringError(f"call to undefined function '{e.name}' at line {e.line}")
            callee = self.fn_index[e.name]
            want = len(self.module.functions[callee].params)
            if len(e.args) != want:
                raise LoweringError(f"'{e.name}' wants {want} args at line {e.line}")
            args = tuple(self.lower_expr(a) for a in e.args)
            # a Call always ends its block: the continuation starts fresh
            self.emit(ir.Call(out, callee, args))
            cont = self.new_block()
            self.terminate(ir.Jump(cont), cont)
            return out
        if isinstance(e, BoolOp):
            cond = self.lower_expr(e.left)
            b_rhs = self.new_block()
            b_const = self.new_block()
            join = self.new_block()
            if e.kind == "and":
                self.terminate(ir.Branch(cond, b_rhs, b_const), b_rhs)
            else:
                self.terminate(ir.Branch(cond, b_const, b_rhs), b_rhs)
            self.lower_expr(e.right, dest=out)
            self.terminate(ir.Jump(join), b_const)
            self.emit(ir.Primitive(out, ir.prim_id(_const_name(e.kind == "or"))))
            self.terminate(ir.Jump(join), join)
            return out
        raise TypeError(type(e).__name__)

    def lower_stmts(self, stmts):
        for s in stmts:
            if isinstance(s, Assign):
                if _RESERVED.match(s.name):
                    raise LoweringError(f"reserved variable name '{s.name}' at line {s.line}")
                self.lower_expr(s.expr, dest=s.name)
            elif isinstance(s, If):
                cond = self.lower_expr(s.cond)
                b_then = self.new_block()
                b_else = self.new_block()
                join = self.new_block()
                self.terminate(ir.Branch(cond, b_then, b_else), b_then)
                self.lower_stmts(s.then)
                if self.blocks[self.cur][1] is None:
                    self.terminate(ir.Jump(join))
                self.cur = b_else
                self.lower_stmts(s.orelse)
                if self.blocks[self.cur][1] is None:
                    self.terminate(ir.Jump(join))
                self.cur = join
            elif isinstance(s, While):
                header = self.new_block()
                self.terminate(ir.Jump(header), header)
                cond = self.lower_expr(s.cond)
                b_body = self.new_block()
                b_exit = self.new_block()
                self.terminate(ir.Branch(cond, b_body, b_exit), b_body)
                self.lower_stmts(s.body)
                if self.blocks[self.cur][1] is None:
                    self.terminate(ir.Jump(header))
                self.cur = b_exit
            elif isinstance(s, ReturnStmt):
                self.lower_expr(s.expr, dest=_OUTPUT_VAR)
                self.terminate(ir.Return())
                # anything after a return in this arm is unreachable
                self.cur = self.new_block()
            else:
                raise TypeError(type(s).__name__)

    def finish(self) -> ir.Function:
        self.lower_stmts(self.fdef.body)
        if self.blocks[self.cur][1] is None:
            self.terminate(ir.Return())
        blocks = self._prune()
        return ir.Function(self.fdef.name, self.fdef.params, blocks, _OUTPUT_VAR)

    def _prune(self) -> tuple[ir.Block, ...]:
        """Thread through empty jump-only blocks, drop unreachable ones, renumber."""

        def resolve(i: int) -> int:
            seen = set()
            while i not in seen:
                ops, term = self.blocks[i]
                if ops or not isinstance(term, ir.Jump):
                    return i
                seen.add(i)
                i = term.target
            return i  # cycle of empty jumps: leave as-is

        for i, (ops, term) in enumerate(self.blocks):
            if isinstance(term, ir.Jump):
                self.blocks[i] = (ops, ir.Jump(resolve(term.target)))
            elif isinstance(term, ir.Branch):
                self.blocks[i] = (ops, ir.Branch(
                    term.cond, resolve(term.true_target), resolve(term.false_target)))

        succs = {i: ir.successors(t) for i, (_, t) in enumerate(self.blocks)}
        seen = {0}
        work = [0]
        while work:
            for s in succs[work.pop()]:
                if s not in seen:
                    seen.add(s)
                    work.append(s)
        keep = sorted(seen)
        remap = {old: new for new, old in enumerate(keep)}

        def retarget(t):
            if isinstance(t, ir.Jump):
                return ir.Jump(remap[t.target])
            if isinstance(t, ir.Branch):
                return ir.Branch(t.cond, remap[t.true_target], remap[t.false_target])
            return t

        return tuple(ir.Block(tuple(ops), retarget(term)) for ops, term in
                     (self.blocks[i] for i in keep))


def _const_name(value) -> str:
    from .runtime import const_name

    return const_name(value)


def lower_to_cfg(module: Module, entry: str | None = None) -> ir.CallGraphProgram:
    """Lower a parsed module to a validated CallGraphProgram.

    Every Call ends its basic block; boolean and/or become Branch diamonds;
    join blocks are pruned when both arms return. Raises LoweringError when
    validation finds use-before-assign or a path that misses return.
    """
    for f in module.functions:
        if known_kernel(f.name):
            raise LoweringError(f"function name '{f.name}' shadows a primitive")
        for p in f.params:
            if _RESERVED.match(p):
                raise LoweringError(f"reserved parameter name '{p}' in '{f.name}'")
    fn_index = {f.name: i for i, f in enumerate(module.functions)}
    functions = tuple(_FnLowerer(f, fn_index, module).finish() for f in module.functions)
    entry_idx = 0 if entry is None else fn_index.get(entry, -1)
    if entry_idx < 0:
        raise LoweringError(f"entry function '{entry}' not defined")
    prog = ir.CallGraphProgram(functions, entry_idx)
    diags = ir.validate_callgraph(prog)
    if diags:
        raise LoweringError("; ".join(diags))
    return prog


def compile_source(src: str, entry: str | None = None) -> ir.CallGraphProgram:
    return lower_to_cfg(parse_source(src), entry)
