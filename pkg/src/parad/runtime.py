"""A small structured fork-join runtime on top of :mod:`threading`.

Every construct reports its begin and end to :mod:`parad.logic`, so code
written against this runtime is differentiated without further annotation.
Team members are real threads; the thread that opens a region runs index 0.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

from . import logic
from .logic import MutexKey, MutexKind, SyncKind, WorkKind
from .tape import ContractError

_config = {"max_team_size": 64}


def configure(max_team_size: int | None = None) -> None:
    if max_team_size is not None:
        if max_team_size < 1:
            raise ContractError(f"max team size {max_team_size} < 1")
        _config["max_team_size"] = max_team_size


def max_team_size() -> int:
    return _config["max_team_size"]


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class Static:
    """Blocks of ``chunk`` iterations dealt round-robin; one block per member by default."""
    chunk: int | None = None


@dataclass(frozen=True)
class Dynamic:
    chunk: int = 1


# -- teams -------------------------------------------------------------------


class _Team:
    def __init__(self, actual: int):
        self.actual = actual
        self.barrier = threading.Barrier(actual)
        self._lock = threading.Lock()
        self._constructs: dict[int, Any] = {}

    def construct(self, seq: int, factory: Callable[[], Any]) -> Any:
        with self._lock:
            state = self._constructs.get(seq)
            if state is None:
                state = self._constructs[seq] = factory()
            return state


class TeamContext:
    """Handle a team member passes to worksharing constructs."""

    def __init__(self, index: int, actual: int, team: _Team):
        self.index = index
        self.actual = actual
        self._team = team
        self._seq = 0
        self._ordered: list[_OrderedGate] = []

    def __repr__(self) -> str:
        return f"TeamContext(index={self.index}, actual={self.actual})"

    def _shared(self, factory: Callable[[], Any]) -> Any:
        # members encounter constructs in the same order, so the n-th
        # construct of every member maps to the same shared state
        seq = self._seq
        self._seq += 1
        return self._team.construct(seq, factory)


class _Cursor:
    def __init__(self, start: int = 0):
        self.next = start
        self.lock = threading.Lock()

    def take(self, n: int = 1) -> int:
        with self.lock:
            value = self.next
            self.next += n
            return value


def parallel_region(num_threads: int, body: Callable[[TeamContext], Any]) -> None:
    """Run ``body`` once per team member and wait for the team."""
    if num_threads < 1:
        raise ContractError(f"num_threads {num_threads} < 1")
    pd = logic.on_parallel_begin(num_threads)
    actual = min(num_threads, _config["max_team_size"])
    team = _Team(actual)
    errors: list[BaseException] = []

    def member(index: int) -> None:
        td = logic.on_implicit_task_begin(actual, index, pd)
        try:
            ctx = TeamContext(index, actual, team)
            body(ctx)
            _sync(ctx, SyncKind.IMPLICIT_BARRIER)
        except BaseException as exc:  # noqa: BLE001 - re-raised by the encountering thread
            errors.append(exc)
            team.barrier.abort()
        finally:
            logic.on_implicit_task_end(td)

    prefix = threading.current_thread().name
    workers = [threading.Thread(target=member, args=(i,), name=f"{prefix}/{i}")
               for i in range(1, actual)]
    for w in workers:
        w.start()
    member(0)
    for w in workers:
        w.join()
    logic.on_parallel_end(pd)
    if errors:
        real = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
        raise (real or errors)[0]


def _sync(ctx: TeamContext, kind: SyncKind) -> None:
    logic.on_sync_region_begin(kind)
    ctx._team.barrier.wait()
    logic.on_sync_region_end(kind)


def barrier(ctx: TeamContext) -> None:
    _sync(ctx, SyncKind.BARRIER)


# -- worksharing -------------------------------------------------------------


def _iterations(ctx: TeamContext, lo: int, hi: int, schedule) -> Iterator[int]:
    n = hi - lo
    if isinstance(schedule, Static):
        chunk = schedule.chunk or max(1, math.ceil(n / ctx.actual))
        for start in range(lo + ctx.index * chunk, hi, chunk * ctx.actual):
            yield from range(start, min(start + chunk, hi))
    elif isinstance(schedule, Dynamic):
        if schedule.chunk < 1:
            raise ContractError(f"chunk {schedule.chunk} < 1")
        cursor = ctx._shared(lambda: _Cursor(lo))
        while (start := cursor.take(schedule.chunk)) < hi:
            yield from range(start, min(start + schedule.chunk, hi))
    else:
        raise ContractError(f"unknown schedule {schedule!r}")


def for_loop(ctx: TeamContext, lo: int, hi: int, body: Callable[[int], Any],
             schedule: Static | Dynamic = Static(), nowait: bool = False,
             ordered: bool = False) -> None:
    """Distribute ``range(lo, hi)`` over the team.

    With ``ordered`` the body may call :func:`ordered` once per iteration.
    """
    if hi < lo:
        raise ContractError(f"loop range [{lo}, {hi}) is inverted")
    if isinstance(schedule, Static) and schedule.chunk is not None and schedule.chunk < 1:
        raise ContractError(f"chunk {schedule.chunk} < 1")
    gate = ctx._shared(lambda: _OrderedGate(lo)) if ordered else None
    logic.on_work_begin(WorkKind.LOOP)
    if gate is not None:
        ctx._ordered.append(gate)
    try:
        for i in _iterations(ctx, lo, hi, schedule):
            body(i)
            if gate is not None:
                gate.finish(i)
    finally:
        if gate is not None:
            ctx._ordered.pop()
    logic.on_work_end(WorkKind.LOOP)
    if not nowait:
        _sync(ctx, SyncKind.IMPLICIT_BARRIER)


def sections(ctx: TeamContext, bodies: list[Callable[[], Any]], nowait: bool = False) -> None:
    cursor = ctx._shared(_Cursor)
    logic.on_work_begin(WorkKind.SECTIONS)
    while (k := cursor.take()) < len(bodies):
        bodies[k]()
    logic.on_work_end(WorkKind.SECTIONS)
    if not nowait:
        _sync(ctx, SyncKind.IMPLICIT_BARRIER)


def single(ctx: TeamContext, body: Callable[[], Any], nowait: bool = False) -> Any:
    """Run ``body`` on the first member to arrive; returns its result there, None elsewhere."""
    claim = ctx._shared(_Cursor)
    logic.on_work_begin(WorkKind.SINGLE)
    result = body() if claim.take() == 0 else None
    logic.on_work_end(WorkKind.SINGLE)
    if not nowait:
        _sync(ctx, SyncKind.IMPLICIT_BARRIER)
    return result


def master(ctx: TeamContext, body: Callable[[], Any]) -> Any:
    return body() if ctx.index == 0 else None


# -- mutexes -----------------------------------------------------------------

_lock_ids = itertools.count(1)
_critical_lock = threading.Lock()
_critical_ids: dict[str | None, int] = {None: 0}
_critical_mutexes: dict[int, threading.Lock] = {0: threading.Lock()}


def _critical_mutex(name: str | None) -> tuple[MutexKey, threading.Lock]:
    with _critical_lock:
        ident = _critical_ids.get(name)
        if ident is None:
            ident = _critical_ids[name] = len(_critical_ids)
            _critical_mutexes[ident] = threading.Lock()
        return MutexKey(MutexKind.CRITICAL, ident), _critical_mutexes[ident]


@contextmanager
def critical(name: str | None = None) -> Iterator[None]:
    """Mutual exclusion among all threads; equal names share one mutex."""
    key, mutex = _critical_mutex(name)
    mutex.acquire()
    try:
        logic.on_mutex_acquired(key)
        yield
    finally:
        mutex.release()
        logic.on_mutex_released(key)


class Lock:
    kind = MutexKind.LOCK

    def __init__(self) -> None:
        self._mutex = self._make_mutex()
        self.key = MutexKey(self.kind, next(_lock_ids))
        self._owner: int | None = None
        self._depth = 0

    @staticmethod
    def _make_mutex():
        return threading.Lock()

    def set(self) -> None:
        self._mutex.acquire()
        self._owner = threading.get_ident()
        self._depth += 1
        logic.on_mutex_acquired(self.key)

    def unset(self) -> None:
        if self._owner != threading.get_ident():
            raise ContractError(f"{self.key} is not held by this thread")
        self._depth -= 1
        if self._depth == 0:
            self._owner = None
        self._mutex.release()
        logic.on_mutex_released(self.key)

    def __enter__(self) -> Lock:
        self.set()
        return self

    def __exit__(self, *exc) -> None:
        self.unset()


class NestedLock(Lock):
    """Lock that the holding thread may set again."""
    kind = MutexKind.NESTED_LOCK

    @staticmethod
    def _make_mutex():
        return threading.RLock()


def lock_init() -> Lock:
    return Lock()


def nested_lock_init() -> NestedLock:
    return NestedLock()


def get_lock_identifier(handle: Lock) -> MutexKey:
    if not isinstance(handle, Lock):
        raise ContractError(f"{handle!r} is not an initialized lock")
    return handle.key


# -- ordered -----------------------------------------------------------------

_gate_ids = itertools.count(1)


class _OrderedGate:
    """Ticket gate admitting loop iterations in sequence."""

    def __init__(self, lo: int):
        self.next = lo
        self.key = MutexKey(MutexKind.ORDERED, next(_gate_ids))
        self.cond = threading.Condition()

    def enter(self, i: int) -> None:
        with self.cond:
            self.cond.wait_for(lambda: self.next == i)

    def leave(self, i: int) -> None:
        with self.cond:
            self.next = i + 1
            self.cond.notify_all()

    def finish(self, i: int) -> None:
        # lets iterations that skipped their ordered block pass the ticket on
        with self.cond:
            self.cond.wait_for(lambda: self.next >= i)
            if self.next == i:
                self.next = i + 1
                self.cond.notify_all()


def ordered(ctx: TeamContext, iteration: int, body: Callable[[], Any]) -> Any:
    """Run ``body`` of loop iteration ``iteration`` in iteration order."""
    if not ctx._ordered:
        raise ContractError("ordered outside an ordered loop")
    gate = ctx._ordered[-1]
    gate.enter(iteration)
    try:
        logic.on_mutex_acquired(gate.key)
        result = body()
    finally:
        gate.leave(iteration)
        logic.on_mutex_released(gate.key)
    return result


# -- reductions --------------------------------------------------------------


@dataclass(eq=False)
class ReductionDecl:
    combine: Callable[[Any, Any], Any]
    identity: Any
    guard: NestedLock = field(default_factory=NestedLock)


@dataclass(eq=False)
class Shared:
    """Shared accumulator for :func:`reduce`."""
    value: Any


class _Reducer:
    # each wrapper sets the guard; the assignment unsets all of them
    def __init__(self, guard: NestedLock, read: Callable[[], Any]):
        guard.set()
        self.value = read()


def reduce(ctx: TeamContext, decl: ReductionDecl, private: Any, target: Shared) -> Any:
    """Fold every member's ``private`` into ``target`` and return the result."""
    _sync(ctx, SyncKind.REDUCTION)
    guard = decl.guard
    out = _Reducer(guard, lambda: target.value)
    inp = _Reducer(guard, lambda: private)
    res = _Reducer(guard, lambda: decl.combine(out.value, inp.value))
    target.value = res.value
    for _ in range(3):
        guard.unset()
    _sync(ctx, SyncKind.IMPLICIT_BARRIER)
    return target.value
