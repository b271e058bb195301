"""Record the Burgers solver in parallel and reverse it.

Rows are split into horizontal blocks of equal height. Depending on the
adjoint configuration the team either works on one block per thread with
atomic adjoint updates, switches to atomic updates only near block
boundaries, or processes twice as many blocks in two interleaved sweeps so
that no two threads ever share an adjoint in the reverse pass.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import logic, runtime
from .. import tape as _tape
from ..tape import AccessMode, ActiveScalar, ContractError
from ..wrapper import tool
from .solver import (AdjointConfig, Coefficients, SolverConfig, check_stability, initial_fields,
                     interior_indices, objective, ring_fields, update_row)


@dataclass
class AdjointResult:
    value: float
    grad_u: np.ndarray
    grad_v: np.ndarray
    forward_s: float
    reverse_s: float
    statements: int
    boundary_reads: int = 0
    u_final: np.ndarray = field(default=None, repr=False)
    v_final: np.ndarray = field(default=None, repr=False)


def block_bounds(ny: int, blocks: int) -> list[int]:
    """Row boundaries of ``blocks`` near-equal blocks over rows ``1..ny``."""
    if blocks > ny:
        raise ContractError(f"{blocks} blocks do not fit into {ny} rows")
    return [1 + (ny * b) // blocks for b in range(blocks + 1)]


def num_blocks(cfg: SolverConfig) -> int:
    return 2 * cfg.threads if cfg.adjoint is AdjointConfig.CLASSICAL else cfg.threads


def validate(cfg: SolverConfig) -> None:
    check_stability(cfg)
    if cfg.threads < 1:
        raise ContractError(f"threads {cfg.threads} < 1")
    if cfg.adjoint is AdjointConfig.CLASSICAL and cfg.ny < 4 * cfg.threads:
        # interleaved blocks need at least two rows each to keep sweeps apart
        raise ContractError(f"classical adjoints need ny >= 4 * threads, got ny={cfg.ny}")
    block_bounds(cfg.ny, num_blocks(cfg))


class _Step:
    def __init__(self, cfg: SolverConfig, u, v, u_new, v_new):
        self.cfg = cfg
        self.c = Coefficients.of(cfg)
        self.u, self.v, self.u_new, self.v_new = u, v, u_new, v_new
        self.bounds = block_bounds(cfg.ny, num_blocks(cfg))
        self.reads = [0] * len(self.bounds)

    def block(self, b: int, access_control: bool = False) -> None:
        lo, hi = self.bounds[b], self.bounds[b + 1]
        ny, nx = self.cfg.ny, self.cfg.nx
        # rows just outside the block that belong to a neighbour, not the ghost ring
        self.reads[b] += nx * ((lo > 1) + (hi <= ny))
        for j in range(lo, hi):
            if access_control:
                near = (lo > 1 and j < lo + 2) or (hi <= ny and j >= hi - 2)
                mode = AccessMode.ATOMIC if near else AccessMode.CLASSICAL
                if logic.get_adjoint_access_mode() is not mode:
                    logic.set_adjoint_access_mode(mode)
            update_row(self.u, self.v, self.u_new, self.v_new, j, self.c)

    def body(self, ctx: runtime.TeamContext) -> None:
        conf = self.cfg.adjoint
        nt = self.cfg.threads
        if conf is AdjointConfig.CLASSICAL:
            runtime.for_loop(ctx, 0, nt, lambda t: self.block(2 * t), runtime.Static(1), nowait=True)
            logic.add_reverse_barrier()
            runtime.for_loop(ctx, 0, nt, lambda t: self.block(2 * t + 1), runtime.Static(1), nowait=True)
        else:
            control = conf is AdjointConfig.ACCESS_CONTROL
            runtime.for_loop(ctx, 0, nt, lambda b: self.block(b, control), runtime.Static(1))


def _to_grid(values: list, cfg: SolverConfig) -> np.ndarray:
    return np.array(values, dtype=float).reshape(cfg.ny, cfg.nx)


def record_and_reverse(cfg: SolverConfig) -> AdjointResult:
    """Tape the solver and objective, reverse, and return dJ/d(initial interior).

    Needs an initialized session (:func:`parad.session`).
    """
    validate(cfg)
    master = tool.create_tape()
    previous = tool.get_thread_local_tape()
    tool.set_thread_local_tape(master)
    try:
        return _run(cfg, master)
    finally:
        tool.set_thread_local_tape(previous)
        tool.delete_tape(master)


def _run(cfg: SolverConfig, master: _tape.Tape) -> AdjointResult:
    inside = interior_indices(cfg)
    u, v = initial_fields(cfg)
    start_mode = logic.get_adjoint_access_mode()

    t0 = time.perf_counter()
    begin = tool.get_tape_position(master)
    tool.set_active(master, True)
    if cfg.adjoint is not AdjointConfig.ATOMIC:
        logic.set_adjoint_access_mode(AccessMode.CLASSICAL)
    inputs_u = [master.register_input(ActiveScalar(u[k])) for k in inside]
    inputs_v = [master.register_input(ActiveScalar(v[k])) for k in inside]
    for k, a, b in zip(inside, inputs_u, inputs_v):
        u[k] = a
        v[k] = b
    reads = 0
    for n in range(cfg.steps):
        u_new, v_new = ring_fields(cfg, (n + 1) * cfg.dt)
        st = _Step(cfg, u, v, u_new, v_new)
        runtime.parallel_region(cfg.threads, st.body)
        reads += sum(st.reads)
        u, v = u_new, v_new
    j = objective(u, v, cfg)
    tool.set_active(master, False)
    logic.set_adjoint_access_mode(start_mode)
    forward = time.perf_counter() - t0
    if not math.isfinite(j.value):
        raise ValueError("objective is not finite")

    statements = master.num_statements + sum(
        t.num_statements for t in _tape.engine().tapes.values() if t is not master)
    adj = _tape.engine().adjoints
    t0 = time.perf_counter()
    _tape.seed(j, 1.0)
    tool.evaluate(master, tool.get_tape_position(master), begin,
                  use_atomics=cfg.adjoint is AdjointConfig.ATOMIC)
    reverse = time.perf_counter() - t0

    data = adj.data
    grad_u = _to_grid([data[x.id] for x in inputs_u], cfg)
    grad_v = _to_grid([data[x.id] for x in inputs_v], cfg)
    u_final = _to_grid([u[k].value if isinstance(u[k], ActiveScalar) else u[k] for k in inside], cfg)
    v_final = _to_grid([v[k].value if isinstance(v[k], ActiveScalar) else v[k] for k in inside], cfg)
    tool.reset(master)
    _tape.recycle_identifiers()
    return AdjointResult(j.value, grad_u, grad_v, forward, reverse, statements, reads,
                         u_final, v_final)
