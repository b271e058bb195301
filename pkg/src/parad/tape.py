"""Reverse-mode tape with thread-local recording and positional evaluation.

Each recording thread owns the tape installed in its thread-local slot.
Overloaded operations on :class:`ActiveScalar` append one statement per
elementary operation: the left-hand-side identifier, and for every active
argument its identifier plus the local partial derivative. Evaluation walks a
position range backwards and applies, per statement,
``adj[arg] += partial * adj[lhs]`` followed by ``adj[lhs] = 0``.

Statements are stored structure-of-arrays. Special entries (external
functions and access-mode markers) live in a side index keyed by their entry
position, so a position is simply ``statements + specials`` recorded so far.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
import threading
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

log = logging.getLogger(__name__)

MAX_IDENTIFIER = 2**63 - 1


class ContractError(RuntimeError):
    """A caller violated a documented precondition."""


class IdentifierSpaceExhausted(MemoryError):
    pass


class AccessMode(enum.Enum):
    """How adjoint writes are performed during evaluation."""

    ATOMIC = "atomic"
    CLASSICAL = "classical"


# -- diagnostics -------------------------------------------------------------

diagnostics: Counter[str] = Counter()
_diag_lock = threading.Lock()


def note(kind: str) -> None:
    with _diag_lock:
        diagnostics[kind] += 1


# -- identifiers -------------------------------------------------------------

# itertools.count.__next__ is a single C call, hence atomic under the GIL.
_ids = itertools.count(1)
_next_id = _ids.__next__


def new_identifier() -> int:
    """Return a fresh, globally unique identifier (> 0)."""
    ident = _next_id()
    if ident > MAX_IDENTIFIER:
        raise IdentifierSpaceExhausted(f"identifier {ident} exceeds {MAX_IDENTIFIER}")
    return ident


def identifiers_issued() -> int:
    """Largest identifier handed out so far (0 if none)."""
    # __reduce__ exposes the counter's next value without consuming it.
    return _ids.__reduce__()[1][0] - 1


def _restart_identifiers() -> None:
    global _ids, _next_id
    _ids = itertools.count(1)
    _next_id = _ids.__next__


# -- positions and entries ---------------------------------------------------


@dataclass(frozen=True, order=True)
class Position:
    tape_id: int
    entry: int

    def __str__(self) -> str:
        return f"{self.tape_id}:{self.entry}"

    @classmethod
    def parse(cls, text: str) -> Position:
        tape_id, entry = text.split(":")
        return cls(int(tape_id), int(entry))


@dataclass(frozen=True)
class ExternalFunction:
    """A callable embedded in the tape and run when evaluation reaches it.

    ``func(payload, adjoints)`` runs during reverse traversal. ``discard``,
    if given, is called as ``discard(payload, clear_adjoints)`` when a reset
    drops the entry.
    """

    func: Callable[[Any, AdjointVector], None]
    payload: Any = None
    discard: Callable[[Any, bool], None] | None = None


# -- adjoint vector ----------------------------------------------------------


class AdjointVector:
    """Growable adjoint storage shared by all evaluating threads.

    Atomic access goes through a striped lock table; classical access writes
    the underlying list directly.
    """

    #: Subclasses that set this route every adjoint access through
    #: :meth:`take` and :meth:`add`, which makes writes observable.
    instrumented = False

    def __init__(self, stripes: int = 1024):
        if stripes & (stripes - 1):
            raise ValueError("stripes must be a power of two")
        self.data: list[float] = [0.0]
        self.mask = stripes - 1
        self.locks = [threading.Lock() for _ in range(stripes)]
        self._grow_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.data)

    def ensure(self, size: int) -> None:
        if len(self.data) < size:
            with self._grow_lock:
                missing = size - len(self.data)
                if missing > 0:
                    self.data.extend([0.0] * missing)

    def __getitem__(self, ident: int) -> float:
        data = self.data
        return data[ident] if ident < len(data) else 0.0

    def __setitem__(self, ident: int, value: float) -> None:
        if ident == 0:
            return
        self.ensure(ident + 1)
        self.data[ident] = value

    def clear(self) -> None:
        self.data[:] = [0.0] * len(self.data)

    def shrink(self, size: int = 1) -> None:
        with self._grow_lock:
            del self.data[max(size, 1):]

    def nonzero(self) -> dict[int, float]:
        return {i: a for i, a in enumerate(self.data) if a != 0.0}

    def take(self, ident: int, atomic: bool) -> float:
        """Read an adjoint and reset it to zero."""
        data = self.data
        if atomic:
            with self.locks[ident & self.mask]:
                value = data[ident]
                data[ident] = 0.0
        else:
            value = data[ident]
            data[ident] = 0.0
        return value

    def add(self, ident: int, delta: float, atomic: bool) -> None:
        if atomic:
            with self.locks[ident & self.mask]:
                self.data[ident] += delta
        else:
            self.data[ident] += delta


# -- tape --------------------------------------------------------------------

_tape_ids = itertools.count(1)


class Tape:
    """Append-only recording of statements and special entries."""

    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.active = False
        self.access_mode = AccessMode.ATOMIC
        self._lhs: list[int] = []
        self._arg_end: list[int] = [0]
        self._args: list[int] = []
        self._partials: list[float] = []
        self._sp_entry: list[int] = []
        self._sp_obj: list[ExternalFunction | AccessMode] = []

    def __repr__(self) -> str:
        state = "active" if self.active else "passive"
        return f"<Tape {self.id} {state} entries={len(self)}>"

    def __len__(self) -> int:
        return len(self._lhs) + len(self._sp_entry)

    @property
    def num_statements(self) -> int:
        return len(self._lhs)

    # recording

    def position(self) -> Position:
        return Position(self.id, len(self._lhs) + len(self._sp_entry))

    def register_input(self, x: ActiveScalar) -> ActiveScalar:
        x.id = new_identifier()
        return x

    def record(self, lhs: int, partials: Sequence[float], args: Sequence[int]) -> None:
        """Append the statement ``lhs = phi(args)`` with the given partials."""
        if not self.active:
            return
        if len(partials) != len(args):
            raise ContractError(f"{len(partials)} partials for {len(args)} arguments")
        if lhs <= 0:
            raise ContractError("statement lhs must be an active identifier")
        for p in partials:
            if not math.isfinite(p):
                raise ContractError(f"non-finite partial {p!r}")
        for p, a in zip(partials, args):
            if a:
                self._args.append(a)
                self._partials.append(p)
        self._lhs.append(lhs)
        self._arg_end.append(len(self._args))

    def push_external_function(self, func: Callable, payload: Any = None, discard: Callable | None = None) -> None:
        self._push_special(ExternalFunction(func, payload, discard))

    def push_handle(self, handle: ExternalFunction) -> None:
        self._push_special(handle)

    def set_access_mode_marker(self, mode: AccessMode) -> None:
        self.access_mode = mode
        self._push_special(mode)

    def _push_special(self, obj: ExternalFunction | AccessMode) -> None:
        self._sp_entry.append(len(self._lhs) + len(self._sp_entry))
        self._sp_obj.append(obj)

    # inspection

    def _entry_index(self, pos: Position) -> int:
        if pos.tape_id != self.id:
            raise ContractError(f"position {pos} belongs to tape {pos.tape_id}, not {self.id}")
        if not 0 <= pos.entry <= len(self):
            raise ContractError(f"position {pos} out of range (tape has {len(self)} entries)")
        return pos.entry

    def _split(self, entry: int) -> tuple[int, int]:
        """Map an entry index to (statements before it, specials before it)."""
        k = bisect_left(self._sp_entry, entry)
        return entry - k, k

    def entries(self, start: int = 0, end: int | None = None) -> Iterator[tuple]:
        """Yield entries in append order as ``("stmt", lhs, partials, args)``,
        ``("ext", ExternalFunction)`` or ``("mode", AccessMode)``."""
        end = len(self) if end is None else end
        s, k = self._split(start)
        s_end, k_end = self._split(end)
        for j in range(k, k_end + 1):
            stop = self._sp_entry[j] - j if j < k_end else s_end
            for i in range(s, stop):
                lo, hi = self._arg_end[i], self._arg_end[i + 1]
                yield ("stmt", self._lhs[i], self._partials[lo:hi], self._args[lo:hi])
            s = stop
            if j < k_end:
                obj = self._sp_obj[j]
                yield ("mode", obj) if isinstance(obj, AccessMode) else ("ext", obj)

    def statements(self) -> list[tuple[int, list[float], list[int]]]:
        return [e[1:] for e in self.entries() if e[0] == "stmt"]

    # evaluation

    def evaluate(
        self,
        start: Position | None = None,
        end: Position | None = None,
        adjoints: AdjointVector | None = None,
        default_mode: AccessMode = AccessMode.ATOMIC,
    ) -> None:
        """Reverse the entries between ``start`` (later) and ``end`` (earlier)."""
        hi = self._entry_index(start) if start is not None else len(self)
        lo = self._entry_index(end) if end is not None else 0
        if hi < lo:
            raise ContractError(f"evaluation runs backwards: start {hi} < end {lo}")
        adj = adjoints if adjoints is not None else engine().adjoints
        adj.ensure(identifiers_issued() + 1)

        k_lo = bisect_left(self._sp_entry, lo)
        k_hi = bisect_left(self._sp_entry, hi)
        # mode in effect after each special of the range, in forward order
        modes = []
        mode = default_mode
        for j in range(k_lo, k_hi):
            obj = self._sp_obj[j]
            if isinstance(obj, AccessMode):
                mode = obj
            modes.append(mode)

        sp_entry, sp_obj = self._sp_entry, self._sp_obj
        stmt_hi = hi - k_hi
        for j in range(k_hi - 1, k_lo - 1, -1):
            stmt_at = sp_entry[j] - j
            mode = modes[j - k_lo]
            self._reverse(adj, stmt_at, stmt_hi, mode)
            obj = sp_obj[j]
            if not isinstance(obj, AccessMode):
                obj.func(obj.payload, adj)
            stmt_hi = stmt_at
        # statements ahead of the first special in range run under the default
        self._reverse(adj, lo - k_lo, stmt_hi, default_mode)

    def _reverse(self, adj: AdjointVector, s_lo: int, s_hi: int, mode: AccessMode) -> None:
        if s_hi <= s_lo:
            return
        lhs, arg_end, args, partials = self._lhs, self._arg_end, self._args, self._partials
        atomic = mode is AccessMode.ATOMIC
        if adj.instrumented:
            take, add = adj.take, adj.add
            for s in range(s_hi - 1, s_lo - 1, -1):
                aw = take(lhs[s], atomic)
                if aw:
                    for k in range(arg_end[s], arg_end[s + 1]):
                        add(args[k], partials[k] * aw, atomic)
            return
        data = adj.data
        if not atomic:
            for s in range(s_hi - 1, s_lo - 1, -1):
                w = lhs[s]
                aw = data[w]
                if aw:
                    data[w] = 0.0
                    for k in range(arg_end[s], arg_end[s + 1]):
                        data[args[k]] += partials[k] * aw
            return
        locks, mask = adj.locks, adj.mask
        for s in range(s_hi - 1, s_lo - 1, -1):
            w = lhs[s]
            with locks[w & mask]:
                aw = data[w]
                data[w] = 0.0
            if aw:
                for k in range(arg_end[s], arg_end[s + 1]):
                    i = args[k]
                    with locks[i & mask]:
                        data[i] += partials[k] * aw

    # editing

    def reset(self, to: Position | None = None, clear_adjoints: bool = True,
              adjoints: AdjointVector | None = None) -> None:
        """Discard everything after ``to``.

        Without a position the whole tape is dropped and, with
        ``clear_adjoints``, the whole adjoint vector is zeroed. A positional
        reset zeroes only the adjoints of discarded left-hand sides.
        """
        full = to is None
        entry = 0 if full else self._entry_index(to)
        n_stmt, k = self._split(entry)
        adj = adjoints
        if clear_adjoints and adj is None and _engine is not None:
            adj = _engine.adjoints
        for j in range(len(self._sp_obj) - 1, k - 1, -1):
            obj = self._sp_obj[j]
            if isinstance(obj, ExternalFunction) and obj.discard is not None:
                obj.discard(obj.payload, clear_adjoints)
        if clear_adjoints and adj is not None:
            if full:
                adj.clear()
            else:
                data = adj.data
                size = len(data)
                for w in self._lhs[n_stmt:]:
                    if w < size:
                        data[w] = 0.0
        del self._lhs[n_stmt:]
        del self._args[self._arg_end[n_stmt]:]
        del self._partials[self._arg_end[n_stmt]:]
        del self._arg_end[n_stmt + 1:]
        del self._sp_entry[k:]
        del self._sp_obj[k:]

    def erase(self, start: Position, end: Position) -> None:
        """Remove the entries in ``[start, end)``."""
        lo, hi = self._entry_index(start), self._entry_index(end)
        if hi < lo:
            raise ContractError(f"erase range [{lo}, {hi}) is inverted")
        if hi == lo:
            return
        s_lo, k_lo = self._split(lo)
        s_hi, k_hi = self._split(hi)
        a_lo, a_hi = self._arg_end[s_lo], self._arg_end[s_hi]
        del self._args[a_lo:a_hi]
        del self._partials[a_lo:a_hi]
        del self._lhs[s_lo:s_hi]
        removed = a_hi - a_lo
        tail = [e - removed for e in self._arg_end[s_hi + 1:]]
        self._arg_end[s_lo + 1:] = tail
        shift = hi - lo
        del self._sp_entry[k_lo:k_hi]
        del self._sp_obj[k_lo:k_hi]
        for j in range(k_lo, len(self._sp_entry)):
            self._sp_entry[j] -= shift

    def append_from(self, src: Tape, start: Position, end: Position) -> None:
        """Copy the entries ``[start, end)`` of ``src`` onto this tape."""
        if src is self:
            raise ContractError("cannot append a tape onto itself")
        lo, hi = src._entry_index(start), src._entry_index(end)
        if hi < lo:
            raise ContractError(f"append range [{lo}, {hi}) is inverted")
        for entry in src.entries(lo, hi):
            if entry[0] == "stmt":
                _, lhs, partials, args = entry
                self._args.extend(args)
                self._partials.extend(partials)
                self._lhs.append(lhs)
                self._arg_end.append(len(self._args))
            elif entry[0] == "ext":
                self._push_special(entry[1])
            else:
                self.set_access_mode_marker(entry[1])


# -- engine state ------------------------------------------------------------


class _Engine:
    def __init__(self) -> None:
        self.adjoints = AdjointVector()
        self.tapes: dict[int, Tape] = {}
        self.lock = threading.Lock()


_engine: _Engine | None = None


def init() -> None:
    global _engine
    if _engine is not None:
        raise ContractError("engine already initialized")
    _restart_identifiers()
    _engine = _Engine()


def finalize() -> None:
    global _engine
    if _engine is None:
        raise ContractError("engine not initialized")
    if _engine.tapes:
        raise ContractError(f"{len(_engine.tapes)} tape(s) still alive at finalize")
    _engine = None
    _tls.tape = None


def is_initialized() -> bool:
    return _engine is not None


def engine() -> _Engine:
    if _engine is None:
        raise ContractError("engine not initialized")
    return _engine


def create_tape() -> Tape:
    eng = engine()
    tape = Tape()
    with eng.lock:
        eng.tapes[tape.id] = tape
    return tape


def delete_tape(tape: Tape) -> None:
    eng = engine()
    with eng.lock:
        if eng.tapes.pop(tape.id, None) is None:
            raise ContractError(f"tape {tape.id} is not alive")
    tape.active = False


def recycle_identifiers() -> None:
    """Restart identifier numbering once no tape holds statements.

    Linear identifiers are never reused while recordings exist; between
    independent recordings this keeps the adjoint vector from growing.
    """
    eng = engine()
    with eng.lock:
        busy = [t.id for t in eng.tapes.values() if t.num_statements]
    if busy:
        raise ContractError(f"tapes {busy} still hold statements")
    _restart_identifiers()
    eng.adjoints.shrink(1)
    eng.adjoints.clear()


# -- thread-local tape slot --------------------------------------------------


class _Slot(threading.local):
    tape: Tape | None = None


_tls = _Slot()


def current_tape() -> Tape | None:
    return _tls.tape


def set_current_tape(tape: Tape | None) -> None:
    _tls.tape = tape


# -- active scalar -----------------------------------------------------------

_isfinite = math.isfinite
_new = object.__new__


def _result(value: float, ident: int) -> ActiveScalar:
    r = _new(ActiveScalar)
    r.value = value
    r.id = ident
    return r


def _rejected(value: float) -> ActiveScalar:
    note("rejected_statements")
    return _result(value, 0)


def _record1(value: float, a: int, pa: float) -> ActiveScalar:
    tape = _tls.tape
    if tape is None or not tape.active:
        return _result(value, 0)
    if not _isfinite(pa):
        return _rejected(value)
    nid = _next_id()
    args = tape._args
    args.append(a)
    tape._partials.append(pa)
    tape._lhs.append(nid)
    tape._arg_end.append(len(args))
    r = _new(ActiveScalar)
    r.value = value
    r.id = nid
    return r


def _record2(value: float, a: int, pa: float, b: int, pb: float) -> ActiveScalar:
    tape = _tls.tape
    if tape is None or not tape.active:
        return _result(value, 0)
    if not (_isfinite(pa) and _isfinite(pb)):
        return _rejected(value)
    nid = _next_id()
    args, partials = tape._args, tape._partials
    args.append(a)
    args.append(b)
    partials.append(pa)
    partials.append(pb)
    tape._lhs.append(nid)
    tape._arg_end.append(len(args))
    r = _new(ActiveScalar)
    r.value = value
    r.id = nid
    return r


def _unary(value: float, x: ActiveScalar, partial: Callable[[], float]) -> ActiveScalar:
    if x.id:
        try:
            p = partial()
        except (ZeroDivisionError, OverflowError, ValueError):
            return _rejected(value)
        return _record1(value, x.id, p)
    return _result(value, 0)


def _fdiv(a: float, b: float) -> float:
    try:
        return a / b
    except ZeroDivisionError:
        if a == 0.0 or a != a:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)


class ActiveScalar:
    """Floating-point value that records its operations on the thread's tape."""

    __slots__ = ("value", "id")

    def __init__(self, value: float = 0.0, id: int = 0):
        self.value = float(value)
        self.id = id

    def __repr__(self) -> str:
        return f"ActiveScalar({self.value!r}, id={self.id})"

    def __float__(self) -> float:
        return self.value

    @property
    def active(self) -> bool:
        return self.id != 0

    # arithmetic

    def __add__(self, other):
        if type(other) is ActiveScalar:
            v = self.value + other.value
            a, b = self.id, other.id
            if a:
                if b:
                    return _record2(v, a, 1.0, b, 1.0)
                return _record1(v, a, 1.0)
            if b:
                return _record1(v, b, 1.0)
            return _result(v, 0)
        v = self.value + other
        return _record1(v, self.id, 1.0) if self.id else _result(v, 0)

    __radd__ = __add__

    def __sub__(self, other):
        if type(other) is ActiveScalar:
            v = self.value - other.value
            a, b = self.id, other.id
            if a:
                if b:
                    return _record2(v, a, 1.0, b, -1.0)
                return _record1(v, a, 1.0)
            if b:
                return _record1(v, b, -1.0)
            return _result(v, 0)
        v = self.value - other
        return _record1(v, self.id, 1.0) if self.id else _result(v, 0)

    def __rsub__(self, other):
        v = other - self.value
        return _record1(v, self.id, -1.0) if self.id else _result(v, 0)

    def __mul__(self, other):
        if type(other) is ActiveScalar:
            x, y = self.value, other.value
            a, b = self.id, other.id
            if a:
                if b:
                    return _record2(x * y, a, y, b, x)
                return _record1(x * y, a, y)
            if b:
                return _record1(x * y, b, x)
            return _result(x * y, 0)
        v = self.value * other
        return _record1(v, self.id, float(other)) if self.id else _result(v, 0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if type(other) is ActiveScalar:
            x, y = self.value, other.value
            v = _fdiv(x, y)
            a, b = self.id, other.id
            if not (a or b):
                return _result(v, 0)
            inv = _fdiv(1.0, y)
            if a and b:
                return _record2(v, a, inv, b, -v * inv)
            if a:
                return _record1(v, a, inv)
            return _record1(v, b, -v * inv)
        v = _fdiv(self.value, other)
        return _record1(v, self.id, _fdiv(1.0, other)) if self.id else _result(v, 0)

    def __rtruediv__(self, other):
        y = self.value
        v = _fdiv(other, y)
        return _record1(v, self.id, -v * _fdiv(1.0, y)) if self.id else _result(v, 0)

    def __neg__(self):
        return _record1(-self.value, self.id, -1.0) if self.id else _result(-self.value, 0)

    def __pos__(self):
        return self

    def __abs__(self):
        x = self.value
        slope = 1.0 if x > 0 else (-1.0 if x < 0 else 0.0)
        return _record1(abs(x), self.id, slope) if self.id else _result(abs(x), 0)

    def __pow__(self, exponent):
        if type(exponent) is ActiveScalar:
            return exp(log(self) * exponent)
        x = self.value
        try:
            v = x ** exponent
        except ZeroDivisionError:
            v = math.inf
        if isinstance(v, complex):
            v = math.nan
        return _unary(v, self, lambda: exponent * x ** (exponent - 1))

    # comparisons act on the primal value

    def __lt__(self, other):
        return self.value < (other.value if type(other) is ActiveScalar else other)

    def __le__(self, other):
        return self.value <= (other.value if type(other) is ActiveScalar else other)

    def __gt__(self, other):
        return self.value > (other.value if type(other) is ActiveScalar else other)

    def __ge__(self, other):
        return self.value >= (other.value if type(other) is ActiveScalar else other)


def _as_active(x) -> ActiveScalar:
    return x if type(x) is ActiveScalar else ActiveScalar(x)


def sin(x):
    x = _as_active(x)
    return _unary(math.sin(x.value), x, lambda: math.cos(x.value))


def cos(x):
    x = _as_active(x)
    return _unary(math.cos(x.value), x, lambda: -math.sin(x.value))


def exp(x):
    x = _as_active(x)
    try:
        v = math.exp(x.value)
    except OverflowError:
        v = math.inf
    return _unary(v, x, lambda: v)


def log(x):
    x = _as_active(x)
    xv = x.value
    if xv > 0:
        v = math.log(xv)
    else:
        v = -math.inf if xv == 0 else math.nan
    return _unary(v, x, lambda: 1.0 / xv)


def sqrt(x):
    x = _as_active(x)
    xv = x.value
    v = math.sqrt(xv) if xv >= 0 else math.nan
    return _unary(v, x, lambda: 0.5 / v)


def fabs(x):
    return abs(_as_active(x))


# -- seeding and extraction --------------------------------------------------


def seed(x: ActiveScalar, value: float = 1.0) -> None:
    if x.id:
        engine().adjoints[x.id] = value


def gradient(x: ActiveScalar) -> float:
    return engine().adjoints[x.id] if x.id else 0.0
