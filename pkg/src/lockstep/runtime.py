"""Batched value storage and the primitive kernel layer.

A batch holds Z independent lanes. Every value is a numpy array whose leading
axis is Z: scalars are shape (Z,), fixed-length vectors are shape (Z, k).
Three lane dtypes exist: f64, i64, bool. Kernels are total functions applied
to whole batches; masked application keeps untouched lanes bit-identical.

Stacked variables add a depth axis: data is (D, Z, ...) plus one stack
pointer per lane and a cached copy of each lane's top slot. The cache is
write-through, so cached_top[b] == data[pointer[b]-1, b] whenever the lane
has at least one live slot. Lanes with pointer 0 expose junk in the cache;
consuming that unmasked is a caller bug (the pc engine's debug mode checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import StackOverflow, StackUnderflow

# A BatchArray is a plain ndarray with leading axis Z; a LaneMask is a bool
# ndarray of shape (Z,). Aliases keep signatures readable.
BatchArray = np.ndarray
LaneMask = np.ndarray

_DTYPES = {"f64": np.float64, "i64": np.int64, "bool": np.bool_}


@dataclass(frozen=True)
class VType:
    """Static type of one variable: lane dtype plus fixed width (0 = scalar)."""

    kind: str  # 'f64' | 'i64' | 'bool'
    width: int = 0

    def __post_init__(self):
        if self.kind not in _DTYPES:
            raise ValueError(f"unknown lane dtype {self.kind!r}")
        if self.width and self.kind != "f64":
            raise ValueError("vector lanes must be f64")

    @property
    def dtype(self):
        return _DTYPES[self.kind]

    @property
    def lane_shape(self) -> tuple[int, ...]:
        return (self.width,) if self.width else ()

    def __str__(self):
        return self.kind if not self.width else f"f64[{self.width}]"


F64 = VType("f64")
I64 = VType("i64")
BOOL = VType("bool")


def vtype_of(arr: BatchArray) -> VType:
    if arr.dtype == np.float64:
        kind = "f64"
    elif arr.dtype == np.int64:
        kind = "i64"
    elif arr.dtype == np.bool_:
        kind = "bool"
    else:
        raise TypeError(f"unsupported batch dtype {arr.dtype}")
    return VType(kind, 0 if arr.ndim == 1 else arr.shape[1])


def batch(values, kind: str | None = None) -> BatchArray:
    """Build a batch array from per-lane python values."""
    arr = np.asarray(values)
    if kind is not None:
        arr = arr.astype(_DTYPES[kind])
    elif arr.dtype == np.bool_:
        pass
    elif np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.int64)
    else:
        arr = arr.astype(np.float64)
    return arr


def zeros_batch(z: int, vt: VType) -> BatchArray:
    return np.zeros((z,) + vt.lane_shape, dtype=vt.dtype)


# --------------------------------------------------------------------------
# Kernels


@dataclass(frozen=True)
class Kernel:
    """One registered primitive: total batch function plus its static type rule.

    fn(inputs, z) must return a fresh array of shape (z,)+lane_shape and must
    be elementwise per lane (lane b of the output depends only on lane b of
    the inputs); that property is what makes masked and gather-scatter
    application bit-identical.
    """

    name: str
    arity: int
    fn: Callable[[tuple, int], np.ndarray]
    type_rule: Callable[[tuple[VType, ...]], VType]


_REGISTRY: dict[str, Kernel] = {}


def register_kernel(name, arity, fn, type_rule):
    """Register (or re-register, idempotently) a primitive kernel."""
    k = Kernel(name, arity, fn, type_rule)
    _REGISTRY[name] = k
    return k


def _same_numeric(ins):
    a, b = ins
    if a != b or a.kind == "bool":
        raise TypeError(f"operands must share a numeric type, got {a} and {b}")
    return a


def _cmp_rule(ins):
    a, b = ins
    if a != b or a.kind == "bool" or a.width:
        raise TypeError(f"comparison needs matching numeric scalars, got {a} and {b}")
    return BOOL


def _eq_rule(ins):
    a, b = ins
    if a != b or a.width:
        raise TypeError(f"eq needs matching scalars, got {a} and {b}")
    return BOOL


def _bool_rule(ins):
    if any(t != BOOL for t in ins):
        raise TypeError("boolean primitive needs bool operands")
    return BOOL


def _float_unary(ins):
    (a,) = ins
    if a.kind != "f64":
        raise TypeError(f"needs f64 lanes, got {a}")
    return a


def _same_unary(ins):
    (a,) = ins
    if a.kind == "bool":
        raise TypeError("needs numeric lanes")
    return a


def _select_rule(ins):
    c, a, b = ins
    if c != BOOL:
        raise TypeError("select condition must be bool")
    if a != b:
        raise TypeError(f"select branches must match, got {a} and {b}")
    return a


def _vec_pair(ins):
    a, b = ins
    if a.kind != "f64" or not a.width or a != b:
        raise TypeError(f"needs two equal f64 vectors, got {a} and {b}")
    return a


def _dot_rule(ins):
    _vec_pair(ins)
    return F64


def _axpy_rule(ins):
    a, x, y = ins
    if a != F64:
        raise TypeError("axpy scale must be f64 scalar")
    return _vec_pair((x, y))


def _vget_rule(ins):
    v, i = ins
    if v.kind != "f64" or not v.width:
        raise TypeError("vget needs an f64 vector")
    if i.width or i.kind == "bool":
        raise TypeError("vget index must be a numeric scalar")
    return F64


def _vstore_rule(ins):
    v, i, x = ins
    _vget_rule((v, i))
    if x != F64:
        raise TypeError("vstore value must be f64 scalar")
    return v


def _vcat_rule(ins):
    a, b = ins
    if a.kind != "f64" or b.kind != "f64" or not a.width or not b.width:
        raise TypeError("vcat needs two f64 vectors")
    return VType("f64", a.width + b.width)


def _rng_rule(ins):
    for t in ins:
        if t.width or t.kind == "bool":
            raise TypeError("rng_uniform needs numeric scalars")
    return F64


def _id_rule(ins):
    return ins[0]


def _binop(op):
    return lambda ins, z: op(ins[0], ins[1])


def _unop(op):
    return lambda ins, z: op(ins[0])


def _div(ins, z):
    a, b = ins
    if a.dtype == np.int64:
        # total: integer division by zero yields 0 (numpy's wraparound rule)
        return np.floor_divide(a, b)
    return np.divide(a, b)


def _select(ins, z):
    c, a, b = ins
    cond = c if a.ndim == 1 else c[:, None]
    return np.where(cond, a, b)


def _dot(ins, z):
    a, b = ins
    return (a * b).sum(axis=1)


def _axpy(ins, z):
    a, x, y = ins
    return a[:, None] * x + y


def _clip_index(i, width):
    return np.clip(i.astype(np.int64), 0, width - 1)


def _vget(ins, z):
    v, i = ins
    idx = _clip_index(i, v.shape[1])
    return np.take_along_axis(v, idx[:, None], axis=1)[:, 0]


def _vstore(ins, z):
    v, i, x = ins
    out = v.copy()
    idx = _clip_index(i, v.shape[1])
    np.put_along_axis(out, idx[:, None], x[:, None], axis=1)
    return out


def _vcat(ins, z):
    return np.concatenate(ins, axis=1)


_U64 = np.uint64
_MIX_A = _U64(0xA24BAED4963EE407)
_MIX_B = _U64(0x9E3779B97F4A7C15)
_FIN_1 = _U64(0xBF58476D1CE4E5B9)
_FIN_2 = _U64(0x94D049BB133111EB)
_INV_2_53 = np.float64(1.0 / (1 << 53))


def rng_uniform(key: BatchArray, counter: BatchArray) -> BatchArray:
    """Counter-based uniform draw on [0, 1): pure per lane, no hidden state.

    Identical (key, counter) pairs give identical doubles on every engine, so
    masked re-execution on junk lanes cannot corrupt any stream. Inputs may be
    i64 or integral f64; both are hashed as int64.
    """
    k = key.astype(np.int64).astype(_U64)
    c = counter.astype(np.int64).astype(_U64)
    z = k * _MIX_A + c * _MIX_B
    z ^= z >> _U64(30)
    z *= _FIN_1
    z ^= z >> _U64(27)
    z *= _FIN_2
    z ^= z >> _U64(31)
    return (z >> _U64(11)).astype(np.float64) * _INV_2_53


for _name, _fn in [
    ("add", _binop(np.add)),
    ("sub", _binop(np.subtract)),
    ("mul", _binop(np.multiply)),
    ("min", _binop(np.minimum)),
    ("max", _binop(np.maximum)),
]:
    register_kernel(_name, 2, _fn, _same_numeric)
register_kernel("div", 2, _div, _same_numeric)
register_kernel("le", 2, _binop(np.less_equal), _cmp_rule)
register_kernel("lt", 2, _binop(np.less), _cmp_rule)
register_kernel("eq", 2, _binop(np.equal), _eq_rule)
register_kernel("and", 2, _binop(np.logical_and), _bool_rule)
register_kernel("or", 2, _binop(np.logical_or), _bool_rule)
register_kernel("not", 1, _unop(np.logical_not), lambda ins: _bool_rule(ins))
register_kernel("neg", 1, _unop(np.negative), _same_unary)
register_kernel("abs", 1, _unop(np.abs), _same_unary)
for _name in ["sqrt", "exp", "log", "sin", "cos", "floor"]:
    register_kernel(_name, 1, _unop(getattr(np, _name)), _float_unary)
register_kernel("select", 3, _select, _select_rule)
register_kernel("dot", 2, _dot, _dot_rule)
register_kernel("axpy", 3, _axpy, _axpy_rule)
register_kernel("vget", 2, _vget, _vget_rule)
register_kernel("vstore", 3, _vstore, _vstore_rule)
register_kernel("vcat", 2, _vcat, _vcat_rule)
register_kernel("id", 1, lambda ins, z: ins[0].copy(), _id_rule)
register_kernel("rng_uniform", 2, lambda ins, z: rng_uniform(*ins), _rng_rule)


def _parse_const(name: str):
    try:
        _, kind, text = name.split(":", 2)
    except ValueError:
        raise KeyError(name)
    if kind == "i64":
        value = np.int64(int(text))
    elif kind == "f64":
        value = np.float64(float(text))
    elif kind == "bool":
        if text not in ("true", "false"):
            raise KeyError(name)
        value = np.bool_(text == "true")
    else:
        raise KeyError(name)
    return VType(kind), value


def const_name(value) -> str:
    """Canonical const primitive name for a python int/float/bool."""
    if isinstance(value, bool):
        return f"const:bool:{'true' if value else 'false'}"
    if isinstance(value, int):
        return f"const:i64:{value}"
    return f"const:f64:{float(value)!r}"


def resolve_kernel(name: str) -> Kernel:
    """Look up a kernel, materializing parameterized families on demand.

    Families: const:<kind>:<literal> (arity 0), vfill:<k> (scalar -> vector),
    vslice:<i>:<j> (static subvector). Raises KeyError for unknown names.
    """
    k = _REGISTRY.get(name)
    if k is not None:
        return k
    if name.startswith("const:"):
        vt, value = _parse_const(name)
        fn = lambda ins, z, _v=value, _d=vt.dtype: np.full(z, _v, dtype=_d)
        k = Kernel(name, 0, fn, lambda ins, _t=vt: _t)
    elif name.startswith("vfill:"):
        width = int(name.split(":", 1)[1])
        if width <= 0:
            raise KeyError(name)

        def _fill_rule(ins, _w=width):
            if ins[0] != F64:
                raise TypeError("vfill needs an f64 scalar")
            return VType("f64", _w)

        k = Kernel(name, 1, lambda ins, z, _w=width: np.repeat(ins[0][:, None], _w, axis=1), _fill_rule)
    elif name.startswith("vslice:"):
        _, lo, hi = name.split(":", 2)
        lo, hi = int(lo), int(hi)
        if not 0 <= lo < hi:
            raise KeyError(name)

        def _slice_rule(ins, _lo=lo, _hi=hi):
            (a,) = ins
            if a.kind != "f64" or a.width < _hi:
                raise TypeError(f"vslice:{_lo}:{_hi} needs an f64 vector of width >= {_hi}")
            return VType("f64", _hi - _lo)

        k = Kernel(name, 1, lambda ins, z, _lo=lo, _hi=hi: ins[0][:, _lo:_hi].copy(), _slice_rule)
    else:
        raise KeyError(name)
    _REGISTRY[name] = k
    return k


def known_kernel(name: str) -> bool:
    try:
        resolve_kernel(name)
        return True
    except (KeyError, ValueError):
        return False


def apply_kernel(kernel: Kernel, inputs: tuple, z: int) -> np.ndarray:
    """Run a kernel on full-width inputs with totality guaranteed (no traps)."""
    with np.errstate(all="ignore"):
        return kernel.fn(inputs, z)


def apply_masked(kernel: Kernel, inputs: tuple, mask: LaneMask, dest: BatchArray) -> BatchArray:
    """Compute on all lanes, commit only masked lanes into dest.

    Junk-lane computations are discarded; lanes outside the mask keep their
    previous bits exactly.
    """
    full = apply_kernel(kernel, inputs, dest.shape[0])
    dest[mask] = full[mask]
    return dest


def apply_gather_scatter(kernel: Kernel, inputs: tuple, mask: LaneMask, dest: BatchArray) -> BatchArray:
    """Gather masked lanes, compute on the packed batch, scatter back."""
    packed = tuple(a[mask] for a in inputs)
    res = apply_kernel(kernel, packed, int(mask.sum()))
    dest[mask] = res
    return dest


# --------------------------------------------------------------------------
# Per-variable stacks


class StackedVar:
    """One variable's per-lane stack: (D, Z, ...) data + pointers + cached top."""

    __slots__ = ("name", "depth", "z", "vt", "data", "pointers", "cached_top")

    def __init__(self, name: str, depth: int, z: int, vt: VType):
        if depth < 1:
            raise ValueError("stack depth must be >= 1")
        self.name = name
        self.depth = depth
        self.z = z
        self.vt = vt
        self.data = np.zeros((depth, z) + vt.lane_shape, dtype=vt.dtype)
        self.pointers = np.zeros(z, dtype=np.int64)
        self.cached_top = np.zeros((z,) + vt.lane_shape, dtype=vt.dtype)

    def __repr__(self):
        return f"StackedVar({self.name!r}, depth={self.depth}, z={self.z}, {self.vt})"


def stack_push(sv: StackedVar, values: BatchArray, mask: LaneMask) -> None:
    """Push values onto masked lanes; raises StackOverflow naming the first bad lane."""
    lanes = np.flatnonzero(mask)
    if lanes.size == 0:
        return
    ptrs = sv.pointers[lanes]
    over = ptrs >= sv.depth
    if over.any():
        lane = int(lanes[over][0])
        raise StackOverflow(sv.name, lane, f"depth {sv.depth}")
    sv.data[ptrs, lanes] = values[lanes]
    sv.pointers[lanes] = ptrs + 1
    sv.cached_top[lanes] = values[lanes]


def stack_pop(sv: StackedVar, mask: LaneMask) -> None:
    """Drop masked lanes' tops and refresh the cache from the slot beneath."""
    lanes = np.flatnonzero(mask)
    if lanes.size == 0:
        return
    ptrs = sv.pointers[lanes]
    under = ptrs < 1
    if under.any():
        lane = int(lanes[under][0])
        raise StackUnderflow(sv.name, lane)
    ptrs = ptrs - 1
    sv.pointers[lanes] = ptrs
    live = ptrs >= 1
    if live.any():
        ll = lanes[live]
        sv.cached_top[ll] = sv.data[ptrs[live] - 1, ll]
    # lanes popped to 0 keep stale cache bits: unspecified junk by contract


def write_top(sv: StackedVar, values: BatchArray, mask: LaneMask) -> None:
    """In-place update of masked lanes' top slots (write-through to the store)."""
    lanes = np.flatnonzero(mask)
    if lanes.size == 0:
        return
    ptrs = sv.pointers[lanes]
    under = ptrs < 1
    if under.any():
        lane = int(lanes[under][0])
        raise StackUnderflow(sv.name, lane, "update on empty stack")
    sv.data[ptrs - 1, lanes] = values[lanes]
    sv.cached_top[lanes] = values[lanes]


def read_top(sv: StackedVar) -> BatchArray:
    """Current tops for all lanes. Lanes with pointer 0 carry junk; mask accordingly."""
    return sv.cached_top
