"""Timing, scaling and memory measurements for the Burgers adjoint."""

from __future__ import annotations

import csv
import gc
import statistics
import tracemalloc
from typing import IO, Iterable

from .adjoint import record_and_reverse
from .solver import AdjointConfig, SolverConfig

COLUMNS = ["config", "threads", "pass", "mean_s", "min_s", "max_s", "speedup", "efficiency"]
RATIO_CONFIG = "ratio_atomic_over_classical"


def time_runs(cfg: SolverConfig, reps: int, warmups: int) -> dict[str, list[float]]:
    for _ in range(warmups):
        record_and_reverse(cfg)
    times: dict[str, list[float]] = {"forward": [], "reverse": []}
    for _ in range(reps):
        r = record_and_reverse(cfg)
        times["forward"].append(r.forward_s)
        times["reverse"].append(r.reverse_s)
    return times


def benchmark(base: SolverConfig, configs: Iterable[AdjointConfig], thread_counts: Iterable[int],
              reps: int = 3, warmups: int = 1) -> list[dict]:
    """One row per (config, threads, pass); speedups are relative to one thread."""
    if reps < 1:
        raise ValueError("need at least one repetition")
    counts = sorted(set(thread_counts) | {1})
    rows = []
    serial_reverse = {}
    for conf in configs:
        means = {}
        for n in counts:
            times = time_runs(base.with_(adjoint=conf, threads=n), reps, warmups)
            for pass_, ts in times.items():
                mean = statistics.fmean(ts)
                means[pass_, n] = mean
                speedup = means[pass_, 1] / mean
                rows.append(dict(config=conf.value, threads=n, pass_=pass_, mean_s=mean,
                                 min_s=min(ts), max_s=max(ts), speedup=speedup,
                                 efficiency=speedup / n))
        serial_reverse[conf] = means["reverse", 1]
    if AdjointConfig.ATOMIC in serial_reverse and AdjointConfig.CLASSICAL in serial_reverse:
        ratio = serial_reverse[AdjointConfig.ATOMIC] / serial_reverse[AdjointConfig.CLASSICAL]
        rows.append(dict(config=RATIO_CONFIG, threads=1, pass_="reverse", mean_s=ratio,
                         min_s=None, max_s=None, speedup=None, efficiency=None))
    return rows


def write_csv(rows: list[dict], out: IO[str]) -> None:
    w = csv.writer(out)
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r["config"], r["threads"], r["pass_"]] + [
            "" if r[k] is None else f"{r[k]:.6g}"
            for k in ("mean_s", "min_s", "max_s", "speedup", "efficiency")])


def peak_memory(cfg: SolverConfig) -> int:
    """Peak bytes allocated by Python while recording and reversing ``cfg``."""
    gc.collect()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        record_and_reverse(cfg)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if started:
            tracemalloc.stop()
    return peak - base
