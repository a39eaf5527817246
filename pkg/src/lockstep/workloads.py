"""Benchmark programs, target densities, and the NUTS-lite source generator.

Source programs live here as plain text in the package's little language.
Target densities register their log-density and gradient as batched numpy
kernels, so generated samplers call them like any other primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .runtime import F64, VType, known_kernel, register_kernel

TWO_PI = 6.283185307179586

# ---- plain corpus programs ---------------------------------------------------

FIBONACCI = """\
def fibonacci(n) {
  if (n <= 1) {
    return 1;
  }
  left = fibonacci(n - 1);
  return left + fibonacci(n - 2);
}
"""

COUNTDOWN = """\
def countdown(n) {
  while (0 < n) {
    n = n - 1;
  }
  return n;
}
"""

MUTUAL = """\
def pulse(n) {
  if (n <= 0) {
    return 0;
  }
  return n + echo(n - 1);
}

def echo(n) {
  if (n <= 0) {
    return 1;
  }
  return pulse(n - 1) + 1;
}
"""

TWOSITE = """\
def tally(x) {
  acc = 0;
  while (0 < x) {
    acc = acc + x;
    x = x - 1;
  }
  return acc;
}

def twosite(n) {
  if (n <= 2) {
    a = tally(n + 5);
    return a;
  }
  b = tally(n);
  return b + 1;
}
"""

POLY = """\
def poly(x) {
  a = x * x;
  b = a + x;
  c = b * 2 - x;
  return c + 7;
}
"""

ACKERMANN = """\
def ackermann(m, n) {
  if (m <= 0) {
    return n + 1;
  }
  if (n <= 0) {
    return ackermann(m - 1, 1);
  }
  t = ackermann(m, n - 1);
  return ackermann(m - 1, t);
}
"""


def fibonacci_source() -> str:
    return FIBONACCI


# ---- target densities ----------------------------------------------------------


@dataclass
class TargetDensity:
    """A log-density exposed to programs as a pair of registered kernels.

    logpdf maps an f64 vector of width dim to an f64 scalar; grad maps it to
    an f64 vector of the same width. Reference moments are analytic where a
    closed form exists, otherwise filled in lazily by a long sampling run
    (useful for regression tests, not ground truth).
    """

    name: str
    dim: int
    logpdf: str
    grad: str
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    _moment_fn: Callable[[], tuple[np.ndarray, np.ndarray]] | None = field(
        default=None, repr=False)

    def reference_moments(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mean is None or self.cov is None:
            self.mean, self.cov = self._moment_fn()
        return self.mean, self.cov


_TARGETS: dict[str, TargetDensity] = {}


def registered_targets() -> tuple[TargetDensity, ...]:
    """Every density built so far this session, in creation order."""
    return tuple(_TARGETS.values())


def _vec_to_scalar_rule(dim: int):
    def rule(ins):
        (a,) = ins
        if a != VType("f64", dim):
            raise TypeError(f"wants an f64 vector of width {dim}, got {a}")
        return F64
    return rule


def _vec_to_vec_rule(dim: int):
    def rule(ins):
        (a,) = ins
        if a != VType("f64", dim):
            raise TypeError(f"wants an f64 vector of width {dim}, got {a}")
        return a
    return rule


def _make_target(name: str, dim: int, logpdf_fn, grad_fn,
                 mean=None, cov=None, moment_fn=None) -> TargetDensity:
    if name in _TARGETS:
        return _TARGETS[name]
    lp = f"logpdf_{name}"
    gr = f"grad_{name}"
    if not known_kernel(lp):
        register_kernel(lp, 1, lambda ins, z: logpdf_fn(ins[0]), _vec_to_scalar_rule(dim))
    if not known_kernel(gr):
        register_kernel(gr, 1, lambda ins, z: grad_fn(ins[0]), _vec_to_vec_rule(dim))
    t = TargetDensity(name=name, dim=dim, logpdf=lp, grad=gr,
                      mean=mean, cov=cov, _moment_fn=moment_fn)
    _TARGETS[name] = t
    return t


def correlated_gaussian(dim: int, rho: float) -> TargetDensity:
    """Zero-mean gaussian with unit variances and constant correlation rho."""
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if not -1.0 / max(dim - 1, 1) < rho < 1.0:
        raise ValueError(f"rho={rho} is not a valid equicorrelation for dim={dim}")
    tag = "p" if rho >= 0 else "m"
    name = f"g{dim}{tag}{round(abs(rho) * 1000):03d}"
    cov = np.full((dim, dim), rho, dtype=np.float64)
    np.fill_diagonal(cov, 1.0)
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    norm = -0.5 * (dim * math.log(TWO_PI) + logdet)

    def logpdf_fn(x):
        return norm - 0.5 * np.einsum("zi,ij,zj->z", x, prec, x)

    def grad_fn(x):
        return -(x @ prec)

    return _make_target(name, dim, logpdf_fn, grad_fn,
                        mean=np.zeros(dim), cov=cov)


def logistic_regression(n_points: int = 200, n_regressors: int = 5,
                        seed: int = 0) -> TargetDensity:
    """Bayesian logistic posterior on a fixed synthetic design.

    Bernoulli likelihood with a standard normal prior on the weights. The
    design, true weights, and labels are all drawn from the given seed, so
    the density is fully reproducible.
    """
    if n_points < 1 or n_regressors < 1:
        raise ValueError("need at least one point and one regressor")
    name = f"lr{n_points}x{n_regressors}s{seed}"
    rng = np.random.default_rng(seed)
    design = rng.normal(size=(n_points, n_regressors))
    w_true = rng.normal(size=n_regressors)
    probs = 1.0 / (1.0 + np.exp(-(design @ w_true)))
    signs = np.where(rng.random(n_points) < probs, 1.0, -1.0)
    sx = signs[:, None] * design  # rows pre-multiplied by the label sign

    def logpdf_fn(w):
        margins = w @ sx.T  # (z, n_points)
        loglik = -np.logaddexp(0.0, -margins).sum(axis=1)
        return loglik - 0.5 * (w * w).sum(axis=1)

    def grad_fn(w):
        margins = w @ sx.T
        with np.errstate(over="ignore"):
            sig = np.where(margins >= 0,
                           np.exp(-np.clip(margins, 0, None)) /
                           (1.0 + np.exp(-np.clip(margins, 0, None))),
                           1.0 / (1.0 + np.exp(np.clip(margins, None, 0))))
        return sig @ sx - w

    def moment_fn(walkers: int = 64, sweeps: int = 20_000, burn: int = 4_000):
        mrng = np.random.default_rng(seed + 1)
        w = mrng.normal(size=(walkers, n_regressors)) * 0.1
        lp = logpdf_fn(w)
        scale = 0.25 / math.sqrt(n_regressors)
        total = np.zeros(n_regressors)
        outer = np.zeros((n_regressors, n_regressors))
        kept = 0
        for sweep in range(sweeps):
            prop = w + mrng.normal(size=w.shape) * scale
            lp_prop = logpdf_fn(prop)
            accept = np.log(mrng.random(walkers)) < lp_prop - lp
            w = np.where(accept[:, None], prop, w)
            lp = np.where(accept, lp_prop, lp)
            if sweep >= burn:
                total += w.sum(axis=0)
                outer += w.T @ w
                kept += walkers
        mean = total / kept
        cov = outer / kept - np.outer(mean, mean)
        return mean, cov

    return _make_target(name, n_regressors, logpdf_fn, grad_fn,
                        moment_fn=moment_fn)


# ---- NUTS-lite source generation ----------------------------------------------


@dataclass(frozen=True)
class NutsConfig:
    """Shape of one generated sampler: fixed step size, fixed leaf length,
    doubling capped at max_depth, a fixed number of kept iterations."""

    step_size: float = 0.25
    leaf_steps: int = 4
    max_depth: int = 6
    iterations: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.leaf_steps < 1:
            raise ValueError("leaf_steps must be at least 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")

    @property
    def min_stack_depth(self) -> int:
        """Frames a lane can need: doubling nest + helpers + the entry."""
        return self.max_depth + 4


def nuts_lite_source(config: NutsConfig, target: TargetDensity | None = None) -> str:
    """Emit the sampler as source text with all constants baked in.

    The program takes (q0, key) per lane and returns the flattened chain, one
    dim-wide group per iteration. All randomness flows through rng_uniform
    with an explicit per-lane counter, threaded through call results, so any
    engine replays the identical chain.
    """
    if target is None:
        target = correlated_gaussian(2, 0.5)
    k = target.dim
    t = config.iterations
    eps = repr(float(config.step_size))
    width = t * k
    pack = 5 * k + 3
    n_idx, s_idx, c_idx = 5 * k, 5 * k + 1, 5 * k + 2

    def pack_lines(indent: str, prefix: str, pieces: list[str],
                   ret: bool = False) -> list[str]:
        """vcat a list of pieces left to right, one fresh name per width."""
        lines = []
        acc = pieces[0]
        for i, piece in enumerate(pieces[1:], start=1):
            if ret and i == len(pieces) - 1:
                lines.append(f"{indent}return vcat({acc}, {piece});")
                return lines
            lines.append(f"{indent}{prefix}{i} = vcat({acc}, {piece});")
            acc = f"{prefix}{i}"
        return lines

    def normals_body() -> list[str]:
        lines = []
        comps = []
        draws = 2 * ((k + 1) // 2)
        for pair in range((k + 1) // 2):
            a, b = 2 * pair, 2 * pair + 1
            lines += [
                f"  u{a} = rng_uniform(key, c + {float(a)!r});",
                f"  u{b} = rng_uniform(key, c + {float(b)!r});",
                f"  r{pair} = sqrt(0.0 - 2.0 * log(1.0 - u{a}));",
                f"  z{a} = r{pair} * cos({TWO_PI!r} * u{b});",
            ]
            comps.append(f"vfill:1(z{a})")
            if 2 * pair + 1 < k:
                lines.append(f"  z{b} = r{pair} * sin({TWO_PI!r} * u{b});")
                comps.append(f"vfill:1(z{b})")
        comps.append(f"vfill:1(c + {float(draws)!r})")
        lines += pack_lines("  ", "pk", comps, ret=True)
        return lines

    def store_body() -> list[str]:
        lines = [f"    base = it * {k};"]
        for ci in range(k):
            lines.append(
                f"    chain = vstore(chain, base + {ci}, vget(q, {ci}));")
        return lines

    src = [
        f"def nuts_main(q0, key) {{",
        f"  chain = vfill:{width}(0.0);",
        f"  c = 0.0;",
        f"  q = q0;",
        f"  it = 0;",
        f"  while (it < {t}) {{",
        f"    d = draw_normals(key, c);",
        f"    p = vslice:0:{k}(d);",
        f"    c = vget(d, {k});",
        f"    joint0 = {target.logpdf}(q) - 0.5 * dot(p, p);",
        f"    u0 = rng_uniform(key, c);",
        f"    c = c + 1.0;",
        f"    logu = joint0 + log(1.0 - u0);",
        f"    qm = q;",
        f"    pm = p;",
        f"    qp = q;",
        f"    pp = p;",
        f"    prop = q;",
        f"    n = 1.0;",
        f"    s = 1.0;",
        f"    j = 0;",
        f"    while (j < {config.max_depth} and 0.0 < s) {{",
        f"      ud = rng_uniform(key, c);",
        f"      c = c + 1.0;",
        f"      dir = select(ud < 0.5, 0.0 - 1.0, 1.0);",
        f"      if (0.0 < dir) {{",
        f"        t = build_tree(qp, pp, dir, j, logu, key, c);",
        f"      }} else {{",
        f"        t = build_tree(qm, pm, dir, j, logu, key, c);",
        f"      }}",
        f"      s2 = vget(t, {s_idx});",
        f"      n2 = vget(t, {n_idx});",
        f"      c = vget(t, {c_idx});",
        f"      if (0.0 < dir) {{",
        f"        qp = vslice:{2 * k}:{3 * k}(t);",
        f"        pp = vslice:{3 * k}:{4 * k}(t);",
        f"      }} else {{",
        f"        qm = vslice:0:{k}(t);",
        f"        pm = vslice:{k}:{2 * k}(t);",
        f"      }}",
        f"      ua = rng_uniform(key, c);",
        f"      c = c + 1.0;",
        f"      if (0.0 < s2) {{",
        f"        accept = ua * n < n2;",
        f"        prop = select(accept, vslice:{4 * k}:{5 * k}(t), prop);",
        f"      }}",
        f"      n = n + n2;",
        f"      dq = sub(qp, qm);",
        f"      sa = select(0.0 <= dot(dq, pm), 1.0, 0.0);",
        f"      sb = select(0.0 <= dot(dq, pp), 1.0, 0.0);",
        f"      s = s2 * sa * sb;",
        f"      j = j + 1;",
        f"    }}",
        f"    q = prop;",
        *store_body(),
        f"    it = it + 1;",
        f"  }}",
        f"  return chain;",
        f"}}",
        f"",
        f"def build_tree(q, p, dir, depth, logu, key, c) {{",
        f"  if (depth <= 0) {{",
        f"    st = leapfrog(q, p, {eps} * dir);",
        f"    q1 = vslice:0:{k}(st);",
        f"    p1 = vslice:{k}:{2 * k}(st);",
        f"    joint = {target.logpdf}(q1) - 0.5 * dot(p1, p1);",
        f"    n1 = select(logu <= joint, 1.0, 0.0);",
        f"    s1 = select(logu < joint + 1000.0, 1.0, 0.0);",
        *pack_lines("    ", "lf", ["q1", "p1", "q1", "p1", "q1",
                                   "vfill:1(n1)", "vfill:1(s1)", "vfill:1(c)"],
                    ret=True),
        f"  }}",
        f"  d2 = depth - 1;",
        f"  t1 = build_tree(q, p, dir, d2, logu, key, c);",
        f"  s1 = vget(t1, {s_idx});",
        f"  if (s1 <= 0.0) {{",
        f"    return t1;",
        f"  }}",
        f"  qm = vslice:0:{k}(t1);",
        f"  pm = vslice:{k}:{2 * k}(t1);",
        f"  qp = vslice:{2 * k}:{3 * k}(t1);",
        f"  pp = vslice:{3 * k}:{4 * k}(t1);",
        f"  prop = vslice:{4 * k}:{5 * k}(t1);",
        f"  n1 = vget(t1, {n_idx});",
        f"  c = vget(t1, {c_idx});",
        f"  if (0.0 < dir) {{",
        f"    t2 = build_tree(qp, pp, dir, d2, logu, key, c);",
        f"  }} else {{",
        f"    t2 = build_tree(qm, pm, dir, d2, logu, key, c);",
        f"  }}",
        f"  s2 = vget(t2, {s_idx});",
        f"  n2 = vget(t2, {n_idx});",
        f"  c = vget(t2, {c_idx});",
        f"  if (0.0 < dir) {{",
        f"    qp = vslice:{2 * k}:{3 * k}(t2);",
        f"    pp = vslice:{3 * k}:{4 * k}(t2);",
        f"  }} else {{",
        f"    qm = vslice:0:{k}(t2);",
        f"    pm = vslice:{k}:{2 * k}(t2);",
        f"  }}",
        f"  u = rng_uniform(key, c);",
        f"  c = c + 1.0;",
        f"  take = u * (n1 + n2) < n2;",
        f"  prop = select(take, vslice:{4 * k}:{5 * k}(t2), prop);",
        f"  dq = sub(qp, qm);",
        f"  sa = select(0.0 <= dot(dq, pm), 1.0, 0.0);",
        f"  sb = select(0.0 <= dot(dq, pp), 1.0, 0.0);",
        f"  s = s2 * sa * sb;",
        *pack_lines("  ", "tw", ["qm", "pm", "qp", "pp", "prop",
                                 "vfill:1(n1 + n2)", "vfill:1(s)", "vfill:1(c)"],
                    ret=True),
        f"}}",
        f"",
        f"def draw_normals(key, c) {{",
        *normals_body(),
        f"}}",
        f"",
        f"def leapfrog(q, p, e) {{",
        f"  i = 0;",
        f"  while (i < {config.leaf_steps}) {{",
        f"    g = {target.grad}(q);",
        f"    p = axpy(e / 2.0, g, p);",
        f"    q = axpy(e, p, q);",
        f"    g = {target.grad}(q);",
        f"    p = axpy(e / 2.0, g, p);",
        f"    i = i + 1;",
        f"  }}",
        f"  return vcat(q, p);",
        f"}}",
    ]
    return "\n".join(src) + "\n"


def chain_array(flat_chain: np.ndarray, config: NutsConfig, dim: int) -> np.ndarray:
    """Reshape the program's flattened output into (lanes, iterations, dim)."""
    z = flat_chain.shape[0]
    return flat_chain.reshape(z, config.iterations, dim)


# ---- corpus --------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusProgram:
    name: str
    source: str
    entry: str
    make_inputs: Callable[[np.random.Generator, int], list[np.ndarray]]


def _int_inputs(lo: int, hi: int, *, count: int = 1):
    def make(rng: np.random.Generator, z: int) -> list[np.ndarray]:
        return [rng.integers(lo, hi, size=z).astype(np.int64) for _ in range(count)]
    return make


TINY_NUTS = NutsConfig(step_size=0.3, leaf_steps=1, max_depth=2, iterations=2)


def _nuts_inputs(dim: int):
    def make(rng: np.random.Generator, z: int) -> list[np.ndarray]:
        q0 = rng.normal(size=(z, dim)) * 0.5
        key = rng.integers(0, 2**31, size=z).astype(np.int64)
        return [q0, key]
    return make


def corpus() -> list[CorpusProgram]:
    """Every program the differential tests run, with input generators."""
    tiny_target = correlated_gaussian(2, 0.5)
    return [
        CorpusProgram("fibonacci", FIBONACCI, "fibonacci", _int_inputs(0, 11)),
        CorpusProgram("countdown", COUNTDOWN, "countdown", _int_inputs(0, 30)),
        CorpusProgram("mutual", MUTUAL, "pulse", _int_inputs(0, 13)),
        CorpusProgram("twosite", TWOSITE, "twosite", _int_inputs(0, 16)),
        CorpusProgram("poly", POLY, "poly", _int_inputs(-50, 51)),
        CorpusProgram("ackermann", ACKERMANN, "ackermann",
                      lambda rng, z: [rng.integers(0, 3, size=z).astype(np.int64),
                                      rng.integers(0, 4, size=z).astype(np.int64)]),
        CorpusProgram("nuts_lite", nuts_lite_source(TINY_NUTS, tiny_target),
                      "nuts_main", _nuts_inputs(tiny_target.dim)),
    ]


def corpus_program(name: str) -> CorpusProgram:
    for p in corpus():
        if p.name == name:
            return p
    raise KeyError(f"no corpus program named '{name}'")
