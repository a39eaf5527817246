"""Shared error types for the compiler and both execution engines."""


class LockstepError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(LockstepError):
    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        loc = "" if line is None else f" at line {line}" + ("" if col is None else f", col {col}")
        super().__init__(f"{msg}{loc}")
        self.line = line
        self.col = col


class LoweringError(LockstepError):
    """Source program violates a rule checked during lowering (arity, use-before-assign, ...)."""


class ValidationError(LockstepError):
    """An IR failed validation; message carries the diagnostics."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class TypeInferenceError(LockstepError):
    """A variable cannot be given a single static type/shape."""


class StackFault(LockstepError):
    """Base for per-lane stack capacity faults; carries the lane and variable.

    Engines that know which block was executing attach it as .block, and the
    message picks it up.
    """

    def __init__(self, variable: str, lane: int, detail: str = ""):
        super().__init__()
        self.variable = variable
        self.lane = lane
        self.detail = detail
        self.block: str | None = None

    def __str__(self) -> str:
        extra = f" ({self.detail})" if self.detail else ""
        where = f" in block '{self.block}'" if self.block else ""
        return f"{self.kind} on variable '{self.variable}' lane {self.lane}{where}{extra}"

    kind = "stack fault"


class StackOverflow(StackFault):
    kind = "stack overflow"


class StackUnderflow(StackFault):
    kind = "stack underflow"


class StepLimitExceeded(LockstepError):
    def __init__(self, limit: int):
        super().__init__(f"step limit exceeded ({limit} batched block executions)")
        self.limit = limit


class HostRecursionLimit(LockstepError):
    def __init__(self, limit: int):
        super().__init__(f"host recursion limit exceeded ({limit} nested calls)")
        self.limit = limit
