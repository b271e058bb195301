"""Reverse-mode operator-overloading AD with parallel tape recording.

Typical use::

    import parad
    from parad import runtime

    with parad.session():
        tape = parad.tool.create_tape()
        parad.tool.set_thread_local_tape(tape)
        tape.active = True
        x = tape.register_input(parad.ActiveScalar(3.0))
        ...
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

from . import logic, runtime, tape
from .logic import MutexKey, MutexKind
from .tape import (
    AccessMode,
    ActiveScalar,
    AdjointVector,
    ContractError,
    Position,
    Tape,
    cos,
    exp,
    fabs,
    gradient,
    log,
    recycle_identifiers,
    seed,
    sin,
    sqrt,
)
from .wrapper import ToolWrapper, external, tool

__all__ = [
    "AccessMode", "ActiveScalar", "AdjointVector", "ContractError", "MutexKey", "MutexKind",
    "Position", "Tape", "ToolWrapper", "cos", "exp", "external", "fabs", "finalize",
    "gradient", "init", "log", "logic", "recycle_identifiers", "runtime", "seed", "session",
    "sin", "sqrt", "tape", "tool",
]


def init(max_team_size: int | None = None, trace=None, spin_budget: int = 64,
         wait_timeout: float | None = None) -> None:
    """Initialize the tape engine, the event logic and the runtime."""
    tool.init()
    logic.init(tool, trace=trace, spin_budget=spin_budget, wait_timeout=wait_timeout)
    runtime.configure(max_team_size)


def finalize() -> None:
    logic.finalize()
    tool.finalize()


@contextmanager
def session(**options) -> Iterator[None]:
    """``init`` on entry; on exit tear down the caller's tape and everything else."""
    init(**options)
    try:
        yield
    finally:
        t = tool.get_thread_local_tape()
        tool.set_thread_local_tape(None)
        if t is not None and tape.is_initialized() and t.id in tape.engine().tapes:
            tool.delete_tape(t)
        if logic.is_initialized():
            logic.finalize()
        if tape.is_initialized():
            for leftover in list(tape.engine().tapes.values()):
                tool.delete_tape(leftover)
            tool.finalize()
