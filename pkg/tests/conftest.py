import numpy as np
import pytest

from lockstep import compile_program, compile_source, workloads


@pytest.fixture(scope="session")
def fib_prog():
    return compile_source(workloads.FIBONACCI, "fibonacci")


@pytest.fixture(scope="session")
def fib_compiled(fib_prog):
    return compile_program(fib_prog)


@pytest.fixture(scope="session")
def compiled_corpus():
    """(program, cfg, compiled) for every corpus entry, compiled once."""
    out = []
    for entry in workloads.corpus():
        cfg = compile_source(entry.source, entry.entry)
        out.append((entry, cfg, compile_program(cfg)))
    return out


def scalar_reference_batch(cfg, inputs):
    """Column-stacked scalar-oracle outputs, one lane at a time."""
    from lockstep import run_scalar_reference

    z = inputs[0].shape[0]
    rows = [run_scalar_reference(cfg, [a[i:i + 1] for a in inputs])[0] for i in range(z)]
    return np.stack(rows)
