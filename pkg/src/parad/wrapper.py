"""Coupling surface between the differentiation logic and a tape engine.

The logic layer only talks to tapes through a :class:`ToolWrapper`. Tapes and
positions are treated as opaque handles, so another engine can be slotted in
by providing an object with the same methods.
"""

from __future__ import annotations

import struct
from typing import Any

from . import tape as _tape
from .tape import AccessMode, ExternalFunction, Position, Tape


class ToolWrapper:
    def init(self) -> None:
        _tape.init()

    def finalize(self) -> None:
        _tape.finalize()

    # tape creation and deletion

    def create_tape(self) -> Tape:
        return _tape.create_tape()

    def delete_tape(self, tape: Tape) -> None:
        _tape.delete_tape(tape)

    # thread-local tape of the caller

    def get_thread_local_tape(self) -> Tape | None:
        return _tape.current_tape()

    def set_thread_local_tape(self, tape: Tape | None) -> None:
        _tape.set_current_tape(tape)

    # positions are immutable values; alloc/free exist for interface parity

    def alloc_position(self) -> Position:
        return Position(0, 0)

    def free_position(self, position: Position) -> None:
        pass

    def get_position_size(self) -> int:
        return struct.calcsize("qq")

    def position_to_string(self, position: Position) -> str:
        return str(position)

    def get_tape_position(self, tape: Tape) -> Position:
        return tape.position()

    # tape handling

    def is_active(self, tape: Tape) -> bool:
        return tape.active

    def set_active(self, tape: Tape, active: bool) -> None:
        tape.active = active

    def evaluate(self, tape: Tape, start: Position, end: Position, use_atomics: bool = True,
                 adjoints=None) -> None:
        mode = AccessMode.ATOMIC if use_atomics else AccessMode.CLASSICAL
        tape.evaluate(start, end, adjoints, default_mode=mode)

    def set_access_mode(self, tape: Tape, mode: AccessMode) -> None:
        tape.set_access_mode_marker(mode)

    def reset(self, tape: Tape, position: Position | None = None, clear_adjoints: bool = True) -> None:
        tape.reset(position, clear_adjoints)

    def push_external_function(self, tape: Tape, handle: ExternalFunction) -> None:
        tape.push_handle(handle)

    # tape editing

    def erase(self, tape: Tape, start: Position, end: Position) -> None:
        tape.erase(start, end)

    def append(self, dst: Tape, src: Tape, start: Position, end: Position) -> None:
        dst.append_from(src, start, end)


tool = ToolWrapper()


def external(func, payload: Any = None, discard=None) -> ExternalFunction:
    """Build an external-function handle for :meth:`ToolWrapper.push_external_function`."""
    return ExternalFunction(func, payload, discard)
