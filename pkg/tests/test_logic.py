import re
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import parad
from parad import AccessMode, ActiveScalar, AdjointVector, ContractError, logic, runtime, tool
from parad import tape as tp
from parad.logic import MutexKey, MutexKind, SyncKind
from parad.wrapper import external


def mark(fn, payload=None):
    """Push ``fn(payload)`` onto the caller's tape for the reverse pass."""
    tool.push_external_function(tool.get_thread_local_tape(), external(lambda p, a: fn(p), payload))


def inputs(t, *values):
    return [t.register_input(ActiveScalar(v)) for v in values]


# -- parallel regions --------------------------------------------------------


def test_two_thread_region_gradient(recording):
    xs = inputs(recording, 1.0, 5.0)
    ys = [None, None]

    def body(ctx):
        ys[ctx.index] = xs[ctx.index] * 2.0

    runtime.parallel_region(2, body)
    parad.seed(ys[0], 1.5)
    parad.seed(ys[1], -3.0)
    recording.evaluate()
    assert [parad.gradient(x) for x in xs] == [3.0, -6.0]


def test_region_where_only_master_records(recording):
    (x,) = inputs(recording, 2.0)
    out = []
    runtime.parallel_region(4, lambda ctx: out.append(x * x) if ctx.index == 0 else None)
    parad.seed(out[0], 1.0)
    recording.evaluate()
    assert parad.gradient(x) == 4.0


def test_passive_region_pushes_nothing(recording):
    recording.active = False
    runtime.parallel_region(3, lambda ctx: runtime.barrier(ctx))
    assert len(recording) == 0
    assert logic.pool_tapes() == {}


def test_requested_parallelism_must_be_positive(session):
    with pytest.raises(ContractError):
        logic.on_parallel_begin(0)


def test_task_end_on_wrong_thread(recording):
    pd = logic.on_parallel_begin(2)
    td = logic.on_implicit_task_begin(2, 0, pd)
    errors = []

    def other():
        try:
            logic.on_implicit_task_end(td)
        except ContractError as exc:
            errors.append(exc)

    t = threading.Thread(target=other)
    t.start()
    t.join()
    assert errors
    logic.on_implicit_task_end(td)


def test_reverse_runs_each_task_on_its_own_thread(recording):
    seen = []

    def inner(ctx):
        mark(lambda p: seen.append((p, threading.current_thread().name)), logic.current_path())

    runtime.parallel_region(2, lambda ctx: runtime.parallel_region(2, inner))
    recording.evaluate()
    assert sorted(seen) == [(p, f"reverse-{p}") for p in ("0/0", "0/1", "1/0", "1/1")]


def test_sibling_regions_reuse_tapes(recording):
    tapes = []

    def body(ctx):
        tapes.append((ctx.index, tool.get_thread_local_tape()))

    (x,) = inputs(recording, 3.0)
    ys = []
    runtime.parallel_region(2, body)
    runtime.parallel_region(2, lambda ctx: ys.append(x * float(ctx.index + 1)))
    runtime.parallel_region(2, body)
    first, second = dict(tapes[:2]), dict(tapes[2:])
    assert first[0] is second[0] and first[1] is second[1]
    assert first[0] is not first[1]
    for y in ys:
        parad.seed(y, 1.0)
    recording.evaluate()
    assert parad.gradient(x) == 3.0


def test_nested_regions_use_distinct_tapes(recording):
    leaves = {}
    lock = threading.Lock()

    def inner(ctx):
        with lock:
            leaves[logic.current_path()] = tool.get_thread_local_tape().id

    def outer(ctx):
        time.sleep(0.002 * ctx.index)
        runtime.parallel_region(2, inner)

    runtime.parallel_region(2, outer)
    assert sorted(leaves) == ["0/0", "0/1", "1/0", "1/1"]
    assert len(set(leaves.values())) == 4
    outer_ids = set(logic.pool_tapes()["0"] + logic.pool_tapes()["1"])
    assert outer_ids.isdisjoint(leaves.values())


def test_delayed_task_end_blocks_reverse(recording):
    (x,) = inputs(recording, 2.0)
    out = {}
    pd = logic.on_parallel_begin(2)
    td0 = logic.on_implicit_task_begin(2, 0, pd)
    out[0] = x * 3.0
    logic.on_implicit_task_end(td0)
    logic.on_parallel_end(pd)
    go = threading.Event()

    def late_member():
        td1 = logic.on_implicit_task_begin(2, 1, pd)
        out[1] = x * 5.0
        go.wait(5)
        logic.on_implicit_task_end(td1)

    member = threading.Thread(target=late_member)
    member.start()
    while 1 not in out:
        time.sleep(0.001)
    parad.seed(out[0], 1.0)
    parad.seed(out[1], 1.0)
    done = threading.Event()
    reverse = threading.Thread(target=lambda: (recording.evaluate(), done.set()))
    reverse.start()
    assert not done.wait(0.1)
    go.set()
    member.join()
    reverse.join()
    assert parad.gradient(x) == 8.0


def test_event_without_tape_is_diagnosed(session):
    before = tp.diagnostics["event_without_tape"]
    assert logic.on_parallel_begin(2) is None
    assert tp.diagnostics["event_without_tape"] == before + 1


def test_activity_gating(recording):
    recording.active = False
    key = MutexKey(MutexKind.LOCK, 4242)
    state = logic.export_state()
    pd = logic.on_parallel_begin(2)
    td = logic.on_implicit_task_begin(2, 0, pd)
    logic.on_sync_region_begin(SyncKind.BARRIER)
    logic.on_sync_region_end(SyncKind.BARRIER)
    logic.on_mutex_acquired(key)
    logic.on_mutex_released(key)
    logic.add_reverse_barrier()
    logic.add_reverse_flush()
    logic.on_implicit_task_end(td)
    logic.on_parallel_end(pd)
    assert len(recording) == 0
    assert logic.export_state() == state


# -- barriers ----------------------------------------------------------------


@pytest.mark.parametrize("threads", [1, 2, 4])
def test_barrier_separates_phases(recording, threads):
    log = []

    def body(ctx):
        mark(log.append, "A")
        runtime.barrier(ctx)
        # stagger reverse arrival so a missing barrier would interleave
        mark(lambda p: (time.sleep(0.001 * ctx.index), log.append(p)), "B")

    runtime.parallel_region(threads, body)
    recording.evaluate()
    assert log == ["B"] * threads + ["A"] * threads


def test_barrier_outside_region_is_diagnosed(recording):
    before = tp.diagnostics["reverse_barrier_outside_region"]
    logic.add_reverse_barrier()
    assert len(recording) == 0
    assert tp.diagnostics["reverse_barrier_outside_region"] == before + 1


def test_reverse_flush_once_per_thread(recording):
    runtime.parallel_region(3, lambda ctx: logic.add_reverse_flush())
    recording.evaluate()
    assert logic.audit()["reverse_flush"] == 3


class MixedWriteDetector(AdjointVector):
    """Flags atomic writes that can still race with another thread's classical writes."""

    instrumented = True

    def __init__(self):
        super().__init__()
        self.events = []
        self.guard = threading.Lock()

    def add(self, ident, delta, atomic):
        with self.guard:
            self.events.append((threading.current_thread().name, ident, atomic))
        super().add(ident, delta, atomic)

    def violations(self):
        last_classical = {}
        for n, (who, ident, atomic) in enumerate(self.events):
            if not atomic:
                last_classical[ident] = (n, who)
        return [e for n, e in enumerate(self.events)
                if e[2] and e[1] in last_classical
                and n < last_classical[e[1]][0] and e[0] != last_classical[e[1]][1]]


@pytest.mark.parametrize("with_barrier, expect_race", [(False, True), (True, False)])
def test_reverse_barrier_prevents_mixed_writes(recording, with_barrier, expect_race):
    shared = inputs(recording, 1.0, 2.0)
    outs = []
    lock = threading.Lock()

    def body(ctx):
        i = ctx.index
        acc = shared[0] * 3.0 + shared[1] * 5.0          # shared reading
        if with_barrier:
            logic.add_reverse_barrier()
        logic.set_adjoint_access_mode(AccessMode.CLASSICAL)
        own = shared[i] * 7.0                             # exclusive access
        if i == 1:
            mark(lambda p: time.sleep(0.05))
        with lock:
            outs.extend([acc, own])

    runtime.parallel_region(2, body)
    adj = MixedWriteDetector()
    for y in outs:
        adj[y.id] = 1.0
    recording.evaluate(adjoints=adj)
    assert bool(adj.violations()) == expect_race
    assert [adj[x.id] for x in shared] == [2 * 3.0 + 7.0, 2 * 5.0 + 7.0]


# -- mutexes -----------------------------------------------------------------


def critical_program(threads, per_thread, name="c"):
    forward, reverse = [], []

    def body(ctx):
        for k in range(per_thread):
            with runtime.critical(name):
                tag = (ctx.index, k)
                forward.append(tag)
                mark(reverse.append, tag)
                mark(lambda p: time.sleep(0))

    runtime.parallel_region(threads, body)
    return forward, reverse


def test_two_threads_reverse_in_inverted_order(recording):
    forward, reverse = critical_program(2, 1)
    recording.evaluate()
    assert reverse == forward[::-1]


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12))
def test_mutex_inversion(threads, per_thread):
    with parad.session(wait_timeout=30):
        t = tool.create_tape()
        tool.set_thread_local_tape(t)
        t.active = True
        forward, reverse = critical_program(threads, per_thread)
        t.evaluate()
        assert len(forward) == threads * per_thread
        assert reverse == forward[::-1]


def test_distinct_mutexes_have_independent_counters(recording):
    def body(ctx):
        with runtime.critical("a"):
            pass
        with runtime.critical("b"):
            pass
        with runtime.critical("b"):
            pass

    runtime.parallel_region(2, body)
    counters = logic.export_state().counters
    a, b = (runtime._critical_mutex(n)[0] for n in "ab")
    assert counters[a] == 2 and counters[b] == 4


def test_reverse_consumes_counters(recording):
    critical_program(3, 4)
    key = runtime._critical_mutex("c")[0]
    assert logic.mutex_counter(key) == 12
    recording.evaluate()
    assert logic.mutex_counter(key) == 0


def test_inactive_mutex_records_nothing(recording):
    lock = runtime.lock_init()
    logic.register_inactive_mutex(lock.key)
    lock.set()
    lock.unset()
    assert len(recording) == 0 and logic.mutex_counter(lock.key) == 0


def test_registration_is_prospective(recording):
    lock = runtime.lock_init()
    with lock:
        pass
    n = len(recording)
    logic.register_inactive_mutex(lock.key)
    with lock:
        pass
    assert n == 2 and len(recording) == 2


def test_nested_lock_counts_each_set(recording):
    lock = runtime.nested_lock_init()
    lock.set()
    lock.set()
    lock.set()
    assert logic.mutex_counter(lock.key) == 3
    for _ in range(3):
        lock.unset()
    recording.evaluate()
    assert logic.mutex_counter(lock.key) == 0


def test_unmatched_release_is_diagnosed(recording):
    before = tp.diagnostics["unmatched_release"]
    logic.on_mutex_released(MutexKey(MutexKind.LOCK, 777))
    assert tp.diagnostics["unmatched_release"] == before + 1
    assert len(recording) == 0


def test_internal_pool_key_is_inactive(recording):
    logic.on_mutex_acquired(logic.INTERNAL_KEY)
    logic.on_mutex_released(logic.INTERNAL_KEY)
    assert len(recording) == 0


# -- access modes ------------------------------------------------------------


def test_default_access_mode(session):
    assert logic.get_adjoint_access_mode() is AccessMode.ATOMIC


def test_mode_change_is_per_thread(recording):
    seen = {}

    def body(ctx):
        if ctx.index == 1:
            logic.set_adjoint_access_mode(AccessMode.CLASSICAL)
        runtime.barrier(ctx)
        seen[ctx.index] = logic.get_adjoint_access_mode()

    runtime.parallel_region(2, body)
    assert seen == {0: AccessMode.ATOMIC, 1: AccessMode.CLASSICAL}
    assert logic.get_adjoint_access_mode() is AccessMode.ATOMIC


def test_tasks_inherit_mode_and_reverse_honours_it(recording):
    (x,) = inputs(recording, 2.0)
    logic.set_adjoint_access_mode(AccessMode.CLASSICAL)
    outs = {}
    runtime.parallel_region(2, lambda ctx: outs.__setitem__(ctx.index, x * 3.0))

    class Spy(AdjointVector):
        instrumented = True

        def __init__(self):
            super().__init__()
            self.modes = set()

        def take(self, ident, atomic):
            self.modes.add(atomic)
            return super().take(ident, atomic)

    adj = Spy()
    for y in outs.values():
        adj[y.id] = 1.0
    recording.evaluate(adjoints=adj)
    assert adj.modes == {False}
    assert adj[x.id] == 6.0


# -- state export ------------------------------------------------------------


def test_fresh_state(session):
    s = logic.export_state()
    assert s.counters == {} and s.mode is AccessMode.ATOMIC


def test_round_trip_state(recording):
    critical_program(2, 2)
    s = logic.export_state()
    logic.recover_state(logic.export_state())
    assert logic.export_state() == s


# -- trace -------------------------------------------------------------------


TRACE_LINE = re.compile(r"seq=\d+ thread=\S+ event=[A-Za-z]+ key=\S+ value=\S+")


def test_trace_format_and_ordering():
    lines = []
    with parad.session(trace=lines.append):
        t = tool.create_tape()
        tool.set_thread_local_tape(t)
        t.active = True

        def body(ctx):
            runtime.for_loop(ctx, 0, 4, lambda i: None)
            with runtime.critical():
                pass

        runtime.parallel_region(2, body)
    assert lines and all(TRACE_LINE.fullmatch(line) for line in lines)
    events = [re.search(r"event=(\w+)", line).group(1) for line in lines]
    assert events[0] == "ParallelBegin" and events[-1] == "ParallelEnd"
    assert events.count("WorkBegin") == events.count("WorkEnd") == 2
    assert events.count("MutexAcquired") == events.count("MutexReleased") == 2
    seqs = [int(re.search(r"seq=(\d+)", line).group(1)) for line in lines]
    assert seqs == list(range(len(lines)))


def test_trace_to_stream(tmp_path):
    path = tmp_path / "trace.txt"
    with open(path, "w") as fh, parad.session(trace=fh):
        t = tool.create_tape()
        tool.set_thread_local_tape(t)
        t.active = True
        runtime.parallel_region(2, lambda ctx: None)
    assert "event=ImplicitTaskBegin key=task:1 value=2" in path.read_text()


def test_logic_lifecycle():
    with pytest.raises(ContractError):
        logic.export_state()
    logic.init()
    with pytest.raises(ContractError):
        logic.init()
    logic.finalize()


def test_reverse_without_recovery_times_out():
    with parad.session(wait_timeout=0.3, spin_budget=4):
        t = tool.create_tape()
        tool.set_thread_local_tape(t)
        t.active = True
        begin = tool.get_tape_position(t)
        critical_program(2, 1)
        end = tool.get_tape_position(t)
        critical_program(2, 1)
        with pytest.raises(logic.ReverseTimeout):
            tool.evaluate(t, end, begin)
        t.active = False
