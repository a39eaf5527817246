"""Automatic batching for control-heavy recursive programs.

Write a scalar program once; run many independent instances of it in
lockstep. Two engines share one frontend and kernel set:

* local: a masked interpreter over the call-graph IR, recursing on the host
  stack, batching lanes within each activation.
* pc: a flat stack-machine VM with per-lane program-counter and data stacks,
  batching lanes across call depths and call sites.

The compiler flattens the call graph into the VM's block program, cancels
redundant stack traffic, and classifies every variable as stacked, register,
or temporary storage.
"""

from .compiler import CompileOptions, CompiledProgram, LoweringMap, compile_program
from .errors import (
    HostRecursionLimit,
    LockstepError,
    LoweringError,
    ParseError,
    StackFault,
    StackOverflow,
    StackUnderflow,
    StepLimitExceeded,
    TypeInferenceError,
    ValidationError,
)
from .frontend import compile_source, eval_ast, parse_source
from .local_exec import run_local, run_scalar_reference, trace_local
from .metrics import (
    ScheduleTrace,
    compare,
    export_trace,
    import_trace,
    trace_to_csv,
    utilization,
)
from .pc_vm import Machine, infer_types, init_machine, run, run_flat, run_vm, step
from .workloads import (
    CorpusProgram,
    NutsConfig,
    TargetDensity,
    corpus,
    corpus_program,
    correlated_gaussian,
    fibonacci_source,
    logistic_regression,
    nuts_lite_source,
    registered_targets,
)

__version__ = "0.1.0"

__all__ = [
    "CompileOptions",
    "CompiledProgram",
    "CorpusProgram",
    "HostRecursionLimit",
    "LockstepError",
    "LoweringError",
    "LoweringMap",
    "Machine",
    "NutsConfig",
    "ParseError",
    "ScheduleTrace",
    "StackFault",
    "StackOverflow",
    "StackUnderflow",
    "StepLimitExceeded",
    "TargetDensity",
    "TypeInferenceError",
    "ValidationError",
    "compare",
    "compile_program",
    "compile_source",
    "corpus",
    "corpus_program",
    "correlated_gaussian",
    "eval_ast",
    "export_trace",
    "fibonacci_source",
    "import_trace",
    "infer_types",
    "init_machine",
    "logistic_regression",
    "nuts_lite_source",
    "parse_source",
    "registered_targets",
    "run",
    "run_flat",
    "run_local",
    "run_scalar_reference",
    "run_vm",
    "step",
    "trace_local",
    "trace_to_csv",
    "utilization",
    "__version__",
]
