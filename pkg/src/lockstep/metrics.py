"""Schedule traces and occupancy accounting for the two engines.

Both engines emit the same trace shape: one record per executed block step,
carrying the batch width that was actually active and a per-primitive count
of kernel invocations scheduled by that block. Occupancy is measured in lane
evaluations: every invocation launches z lanes, of which `active` do useful
work, so utilization weights each step by its invocation count.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class StepRecord:
    block: str
    active: int
    prims: dict[str, int]

    def invocations(self, counted: set[str] | None = None) -> int:
        if counted is None:
            return sum(self.prims.values())
        return sum(n for name, n in self.prims.items() if name in counted)


@dataclass
class ScheduleTrace:
    engine: str
    z: int
    steps: list[StepRecord] = field(default_factory=list)
    stack_ops: dict[str, dict[str, int]] = field(default_factory=dict)

    def record(self, block: str, active: int, prims: dict[str, int]) -> None:
        self.steps.append(StepRecord(str(block), int(active), dict(prims)))

    def record_stack_op(self, var: str, kind: str) -> None:
        per = self.stack_ops.setdefault(var, {"push": 0, "pop": 0, "update": 0})
        per[kind] += 1

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def invocations(self, counted: set[str] | None = None) -> int:
        """Total batched kernel launches, optionally restricted to a name set."""
        return sum(s.invocations(counted) for s in self.steps)


def utilization(trace: ScheduleTrace, counted: set[str] | None = None) -> float:
    """Fraction of launched lane evaluations that were useful.

    Each step contributes active * c lane evaluations of useful work out of
    z * c launched, where c is the step's kernel-invocation count (restricted
    to `counted` names when given, e.g. just the gradient kernel). Steps that
    invoke nothing in the counted set do not dilute the figure.

    A batch of width 1 is always fully utilized: every step runs exactly its
    one lane, so the ratio is 1.0 by construction. Raises ValueError for an
    empty trace or a counted set the trace never invokes.
    """
    if not trace.steps:
        raise ValueError("empty trace has no utilization")
    if trace.z <= 0:
        raise ValueError("trace batch width must be positive")
    num = 0
    den = 0
    for s in trace.steps:
        c = s.invocations(counted)
        num += s.active * c
        den += trace.z * c
    if den == 0:
        raise ValueError("trace invokes none of the counted primitives")
    return num / den


def compare(trace_a: ScheduleTrace, trace_b: ScheduleTrace, counted: set[str] | None = None) -> dict:
    """Side-by-side occupancy summary of two traces of the same run.

    Both traces must describe the same batch width; the ratio reads as
    "how much better b uses its lanes than a".
    """
    if trace_a.z != trace_b.z:
        raise ValueError(f"traces have different batch widths: {trace_a.z} vs {trace_b.z}")
    u_a = utilization(trace_a, counted)
    u_b = utilization(trace_b, counted)
    return {
        "z": trace_a.z,
        "engines": (trace_a.engine, trace_b.engine),
        "steps": (trace_a.step_count, trace_b.step_count),
        "invocations": (trace_a.invocations(counted), trace_b.invocations(counted)),
        "utilization": (u_a, u_b),
        "ratio": u_b / u_a,
    }


def trace_to_json(trace: ScheduleTrace) -> str:
    """Serialize a trace to its JSON wire form."""
    return json.dumps(
        {
            "engine": trace.engine,
            "Z": trace.z,
            "steps": [
                {"block": s.block, "active": s.active, "prims": s.prims}
                for s in trace.steps
            ],
            "stacks": trace.stack_ops,
        },
        indent=2,
    )


def trace_from_json(text: str) -> ScheduleTrace:
    """Inverse of trace_to_json. Rejects traces with no steps."""
    raw = json.loads(text)
    tr = ScheduleTrace(engine=raw["engine"], z=int(raw["Z"]))
    for s in raw["steps"]:
        tr.record(s["block"], s["active"], {str(k): int(v) for k, v in s["prims"].items()})
    for var, ops in raw.get("stacks", {}).items():
        tr.stack_ops[var] = {k: int(v) for k, v in ops.items()}
    if not tr.steps:
        raise ValueError("trace file contains no steps")
    return tr


def export_trace(trace: ScheduleTrace, path) -> None:
    """Write a trace to a JSON file."""
    with open(path, "w") as fh:
        fh.write(trace_to_json(trace))
        fh.write("\n")


def import_trace(path) -> ScheduleTrace:
    """Read a trace written by export_trace, rejecting empty ones."""
    with open(path) as fh:
        return trace_from_json(fh.read())


def trace_to_csv(trace: ScheduleTrace) -> str:
    """Flat (step, block, active) CSV projection of the per-step records."""
    buf = io.StringIO()
    buf.write("step,block,active\n")
    for i, s in enumerate(trace.steps):
        buf.write(f"{i},{s.block},{s.active}\n")
    return buf.getvalue()
