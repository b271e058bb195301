"""Event-driven differentiation of fork-join parallel code.

A parallel runtime reports the beginning and end of its constructs as events.
For each event a forward action runs immediately and, where needed, a reverse
action is pushed onto the calling thread's tape as an external function. The
reverse actions rebuild the parallelism and synchronization of the forward
run while the tapes are evaluated:

* a parallel region is reversed by evaluating every task tape on its own
  thread, joined before the encountering tape continues;
* a sync region (barrier) is reversed into a barrier among the evaluating
  threads;
* mutex-protected sections are stamped with a per-mutex counter and replayed
  in exactly inverted order.

Tapes for implicit tasks come from a pool keyed by the task's path in the
nesting tree, so sibling regions of one parent reuse tapes while concurrently
live tasks never share one.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

from . import tape as _tape
from .tape import AccessMode, AdjointVector, ContractError, Position, Tape, note
from .wrapper import ToolWrapper, external, tool as _default_tool

log = logging.getLogger(__name__)


class Event(enum.Enum):
    PARALLEL_BEGIN = "ParallelBegin"
    PARALLEL_END = "ParallelEnd"
    IMPLICIT_TASK_BEGIN = "ImplicitTaskBegin"
    IMPLICIT_TASK_END = "ImplicitTaskEnd"
    SYNC_REGION_BEGIN = "SyncRegionBegin"
    SYNC_REGION_END = "SyncRegionEnd"
    MUTEX_ACQUIRED = "MutexAcquired"
    MUTEX_RELEASED = "MutexReleased"
    WORK_BEGIN = "WorkBegin"
    WORK_END = "WorkEnd"


class MutexKind(enum.Enum):
    CRITICAL = "critical"
    LOCK = "lock"
    NESTED_LOCK = "nested_lock"
    ORDERED = "ordered"
    REDUCTION = "reduction"


class SyncKind(enum.Enum):
    BARRIER = "barrier"
    IMPLICIT_BARRIER = "implicit_barrier"
    REDUCTION = "reduction"


class WorkKind(enum.Enum):
    LOOP = "loop"
    SECTIONS = "sections"
    SINGLE = "single"


class MutexKey(NamedTuple):
    kind: MutexKind
    id: int

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.id}"


#: Key reserved for the logic's own pool lock; registered inactive at init.
INTERNAL_KEY = MutexKey(MutexKind.LOCK, 0)


class ReverseTimeout(RuntimeError):
    """A reverse synchronization did not complete within the configured timeout."""


# -- AD data -----------------------------------------------------------------


@dataclass(eq=False)
class ParallelData:
    requested: int
    parent_tape: Tape
    parent_path: str
    parent_mode: AccessMode
    actual: int = 0
    tapes: list = field(default_factory=list)
    start: list = field(default_factory=list)
    end: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    reverse_barrier: threading.Barrier | None = None
    _ended: int = 0
    _cond: threading.Condition = field(default_factory=threading.Condition, repr=False)

    def child_path(self, index: int) -> str:
        return f"{self.parent_path}/{index}" if self.parent_path else str(index)

    def _setup(self, actual: int) -> None:
        with self._cond:
            if self.actual == 0:
                if not 1 <= actual <= self.requested:
                    raise ContractError(f"team of {actual} for {self.requested} requested threads")
                self.actual = actual
                self.tapes = [None] * actual
                self.start = [None] * actual
                self.end = [None] * actual
                self.modes = [self.parent_mode] * actual
            elif self.actual != actual:
                raise ContractError(f"inconsistent team size {actual} != {self.actual}")

    def _task_ended(self) -> None:
        with self._cond:
            self._ended += 1
            self._cond.notify_all()

    def wait_complete(self, timeout: float | None = None) -> None:
        with self._cond:
            if not self._cond.wait_for(lambda: self.actual and self._ended == self.actual, timeout):
                raise ReverseTimeout(f"{self._ended} of {self.actual} implicit tasks ended")


@dataclass(eq=False)
class TaskData:
    index: int
    parallel: ParallelData
    path: str
    tape: Tape
    previous_tape: Tape | None
    previous_mode: AccessMode
    thread: int


@dataclass(frozen=True)
class LogicState:
    counters: dict
    mode: AccessMode


# -- module state ------------------------------------------------------------


class _Context:
    def __init__(self, tool: ToolWrapper, trace, spin_budget: int, wait_timeout: float | None):
        self.tool = tool
        self.counters: dict[MutexKey, int] = {}
        self.counter_cv = threading.Condition()
        self.inactive: set[MutexKey] = {INTERNAL_KEY}
        self.pool: dict[str, list[Tape]] = {}
        self.live: set[int] = set()
        self.pool_lock = threading.Lock()
        self.audit: Counter[str] = Counter()
        self.spin_budget = spin_budget
        self.wait_timeout = wait_timeout
        self.seq = itertools.count()
        self.trace_lock = threading.Lock()
        if trace is not None and hasattr(trace, "write"):
            stream = trace
            trace = lambda line: stream.write(line + "\n")  # noqa: E731
        self.trace: Callable[[str], Any] | None = trace


class _Local(threading.local):
    def __init__(self) -> None:
        self.tasks: list[TaskData] = []
        self.mode = AccessMode.ATOMIC
        self.held: dict[MutexKey, list[int]] = {}


_ctx: _Context | None = None
_loc = _Local()


def init(tool: ToolWrapper | None = None, trace=None, spin_budget: int = 64,
         wait_timeout: float | None = None) -> None:
    """Set up logic state.

    ``trace`` is a callable taking one line, or a writable stream.
    ``wait_timeout`` bounds every reverse wait; ``None`` waits forever.
    """
    global _ctx
    if _ctx is not None:
        raise ContractError("logic already initialized")
    _ctx = _Context(tool or _default_tool, trace, spin_budget, wait_timeout)
    _loc.__init__()


def finalize() -> None:
    global _ctx
    ctx = _context()
    with ctx.pool_lock:
        if ctx.live:
            raise ContractError(f"tapes {sorted(ctx.live)} still in use by tasks")
        for tapes in ctx.pool.values():
            for t in tapes:
                ctx.tool.delete_tape(t)
        ctx.pool.clear()
    _ctx = None
    _loc.__init__()


def is_initialized() -> bool:
    return _ctx is not None


def _context() -> _Context:
    if _ctx is None:
        raise ContractError("logic not initialized")
    return _ctx


def _emit(event: Event, key: Any = "-", value: Any = "-") -> None:
    ctx = _ctx
    if ctx is None or ctx.trace is None:
        return
    name = threading.current_thread().name
    with ctx.trace_lock:
        ctx.trace(f"seq={next(ctx.seq)} thread={name} event={event.value} key={key} value={value}")


def _recording_tape() -> Tape | None:
    """Caller's tape if it is recording, else None."""
    ctx = _ctx
    if ctx is None:
        return None
    t = ctx.tool.get_thread_local_tape()
    if t is None:
        return None
    return t if ctx.tool.is_active(t) else None


def current_task() -> TaskData | None:
    return _loc.tasks[-1] if _loc.tasks else None


def current_path() -> str:
    return _loc.tasks[-1].path if _loc.tasks else ""


def audit() -> Counter:
    """Counters for pool acquisitions, reverse flushes and similar bookkeeping."""
    return Counter(_context().audit)


def pool_tapes() -> dict[str, list[int]]:
    ctx = _context()
    with ctx.pool_lock:
        return {path: [t.id for t in tapes] for path, tapes in ctx.pool.items()}


# -- tape pool ---------------------------------------------------------------


def _acquire(path: str) -> Tape:
    ctx = _context()
    with ctx.pool_lock:
        tapes = ctx.pool.setdefault(path, [])
        for t in tapes:
            if t.id not in ctx.live:
                break
        else:
            # the path's tape is still held by a task whose end is delayed
            t = ctx.tool.create_tape()
            tapes.append(t)
        ctx.live.add(t.id)
        ctx.audit["acquired"] += 1
        return t


def _release(t: Tape) -> None:
    ctx = _context()
    with ctx.pool_lock:
        ctx.live.discard(t.id)


# -- parallel regions and implicit tasks --------------------------------------


def on_parallel_begin(requested: int) -> ParallelData | None:
    if requested < 1:
        raise ContractError(f"requested parallelism {requested} < 1")
    _emit(Event.PARALLEL_BEGIN, f"parallel:{current_path() or 'root'}", requested)
    t = _recording_tape()
    if t is None:
        if _ctx is not None and _ctx.tool.get_thread_local_tape() is None:
            note("event_without_tape")
        return None
    return ParallelData(requested, t, current_path(), _loc.mode)


def on_implicit_task_begin(actual: int, index: int, pd: ParallelData | None) -> TaskData | None:
    if not 0 <= index < actual:
        raise ContractError(f"task index {index} outside team of {actual}")
    if pd is None:
        _emit(Event.IMPLICIT_TASK_BEGIN, "task:-", actual)
        return None
    ctx = _context()
    pd._setup(actual)
    path = pd.child_path(index)
    _emit(Event.IMPLICIT_TASK_BEGIN, f"task:{path}", actual)
    t = _acquire(path)
    td = TaskData(index, pd, path, t, ctx.tool.get_thread_local_tape(), _loc.mode,
                  threading.get_ident())
    pd.tapes[index] = t
    pd.start[index] = ctx.tool.get_tape_position(t)
    ctx.tool.set_thread_local_tape(t)
    ctx.tool.set_active(t, True)
    _loc.tasks.append(td)
    _loc.mode = pd.modes[index]
    return td


def on_implicit_task_end(td: TaskData | None) -> None:
    if td is None:
        _emit(Event.IMPLICIT_TASK_END, "task:-")
        return
    _emit(Event.IMPLICIT_TASK_END, f"task:{td.path}")
    if td.thread != threading.get_ident():
        raise ContractError(f"task {td.path} ended on a different thread")
    if not _loc.tasks or _loc.tasks[-1] is not td:
        raise ContractError(f"task {td.path} is not the innermost task of this thread")
    ctx = _context()
    pd = td.parallel
    pd.end[td.index] = ctx.tool.get_tape_position(td.tape)
    ctx.tool.set_active(td.tape, False)
    ctx.tool.set_thread_local_tape(td.previous_tape)
    _loc.mode = td.previous_mode
    _loc.tasks.pop()
    _release(td.tape)
    pd._task_ended()


def on_parallel_end(pd: ParallelData | None) -> None:
    _emit(Event.PARALLEL_END, f"parallel:{pd.parent_path or 'root' if pd else '-'}")
    if pd is None:
        return
    ctx = _context()
    ctx.tool.push_external_function(pd.parent_tape, external(_reverse_parallel, pd, _discard_parallel))


def _reverse_parallel(pd: ParallelData, adjoints: AdjointVector) -> None:
    ctx = _context()
    pd.wait_complete(ctx.wait_timeout)
    n = pd.actual
    pd.reverse_barrier = threading.Barrier(n)
    errors: list[BaseException] = []

    def work(i: int) -> None:
        try:
            ctx.tool.evaluate(pd.tapes[i], pd.end[i], pd.start[i],
                              use_atomics=pd.modes[i] is AccessMode.ATOMIC, adjoints=adjoints)
        except BaseException as exc:  # noqa: BLE001 - re-raised on the joining thread
            errors.append(exc)
            pd.reverse_barrier.abort()

    workers = [threading.Thread(target=work, args=(i,), name=f"reverse-{pd.child_path(i)}")
               for i in range(n)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if errors:
        real = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
        raise (real or errors)[0]


def _discard_parallel(pd: ParallelData, clear_adjoints: bool) -> None:
    ctx = _ctx
    if ctx is None:
        return
    for i in range(pd.actual - 1, -1, -1):
        t, start = pd.tapes[i], pd.start[i]
        if t is not None and start is not None and len(t) >= start.entry:
            ctx.tool.reset(t, start, clear_adjoints)


# -- sync regions ------------------------------------------------------------


def on_sync_region_begin(kind: SyncKind = SyncKind.BARRIER) -> None:
    _emit(Event.SYNC_REGION_BEGIN, f"sync:{kind.value}")


def on_sync_region_end(kind: SyncKind = SyncKind.BARRIER) -> None:
    _emit(Event.SYNC_REGION_END, f"sync:{kind.value}")
    _push_reverse_barrier("sync_outside_region")


def add_reverse_barrier() -> None:
    """Push a barrier that only exists in the reverse pass."""
    _push_reverse_barrier("reverse_barrier_outside_region")


def _push_reverse_barrier(diagnostic: str) -> None:
    t = _recording_tape()
    if t is None:
        return
    td = current_task()
    if td is None:
        note(diagnostic)
        log.warning("barrier outside a recorded parallel region ignored")
        return
    _context().tool.push_external_function(t, external(_reverse_barrier, td.parallel))


def _reverse_barrier(pd: ParallelData, adjoints: AdjointVector) -> None:
    if pd.reverse_barrier is None:
        raise ContractError("reverse barrier evaluated outside its parallel reversal")
    pd.reverse_barrier.wait(_context().wait_timeout)


_fence = threading.Lock()


def add_reverse_flush() -> None:
    """Push a memory fence that only exists in the reverse pass."""
    t = _recording_tape()
    if t is not None:
        _context().tool.push_external_function(t, external(_reverse_flush))


def _reverse_flush(payload: Any, adjoints: AdjointVector) -> None:
    # lock acquire/release is a full fence
    with _fence:
        _context().audit["reverse_flush"] += 1


# -- mutexes -----------------------------------------------------------------


def register_inactive_mutex(key: MutexKey) -> None:
    _context().inactive.add(key)


def on_mutex_acquired(key: MutexKey) -> None:
    """Call while holding the mutex."""
    ctx = _ctx
    if ctx is None or key in ctx.inactive:
        return
    t = _recording_tape()
    if t is None:
        _emit(Event.MUTEX_ACQUIRED, key)
        return
    count = ctx.counters.get(key, 0) + 1
    ctx.counters[key] = count
    _emit(Event.MUTEX_ACQUIRED, key, count)
    held = _loc.held.get(key)
    if held is None:
        _loc.held[key] = [count, 1]
    else:
        held[0] = count
        held[1] += 1
    ctx.tool.push_external_function(t, external(_reverse_acquired, (key, count)))


def on_mutex_released(key: MutexKey) -> None:
    """Call after releasing the mutex; needs no protection."""
    ctx = _ctx
    if ctx is None or key in ctx.inactive:
        return
    t = _recording_tape()
    held = _loc.held.get(key)
    _emit(Event.MUTEX_RELEASED, key, held[0] if held else "-")
    if t is None:
        if held is not None:
            _drop_hold(key, held)
        return
    if held is None:
        note("unmatched_release")
        log.warning("MutexReleased for %s without a matching acquisition", key)
        return
    # a nested holder waits for its most recent stamp; earlier stamps of the
    # same holding are undone after all its releases have been reversed
    count = held[0]
    _drop_hold(key, held)
    ctx.tool.push_external_function(t, external(_reverse_released, (key, count)))


def _drop_hold(key: MutexKey, held: list[int]) -> None:
    held[1] -= 1
    if held[1] == 0:
        del _loc.held[key]


def _reverse_released(payload: tuple[MutexKey, int], adjoints: AdjointVector) -> None:
    key, count = payload
    ctx = _context()
    counters = ctx.counters
    for _ in range(ctx.spin_budget):
        if counters.get(key, 0) == count:
            return
        time.sleep(0)
    with ctx.counter_cv:
        if not ctx.counter_cv.wait_for(lambda: counters.get(key, 0) == count, ctx.wait_timeout):
            raise ReverseTimeout(f"{key} stuck at {counters.get(key, 0)}, waiting for {count}")


def _reverse_acquired(payload: tuple[MutexKey, int], adjoints: AdjointVector) -> None:
    key, count = payload
    ctx = _context()
    with ctx.counter_cv:
        ctx.counters[key] = count - 1
        ctx.counter_cv.notify_all()


def mutex_counter(key: MutexKey) -> int:
    return _context().counters.get(key, 0)


# -- worksharing -------------------------------------------------------------


def on_work_begin(kind: WorkKind) -> None:
    _emit(Event.WORK_BEGIN, f"work:{kind.value}")


def on_work_end(kind: WorkKind) -> None:
    _emit(Event.WORK_END, f"work:{kind.value}")


# -- adjoint access mode -----------------------------------------------------


def set_adjoint_access_mode(mode: AccessMode) -> None:
    """Evaluate everything this thread records from now on under ``mode``."""
    _loc.mode = mode
    t = _recording_tape()
    if t is not None:
        _context().tool.set_access_mode(t, mode)


def get_adjoint_access_mode() -> AccessMode:
    return _loc.mode


# -- state export ------------------------------------------------------------


def export_state() -> LogicState:
    ctx = _context()
    with ctx.counter_cv:
        return LogicState(dict(ctx.counters), _loc.mode)


def recover_state(state: LogicState) -> None:
    ctx = _context()
    with ctx.counter_cv:
        ctx.counters.clear()
        ctx.counters.update(state.counters)
        ctx.counter_cv.notify_all()
    _loc.mode = state.mode
