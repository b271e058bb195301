"""Central finite differences of the objective on the vectorized primal."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .solver import SolverConfig, initial_arrays, objective_arrays, simulate


class Sample(NamedTuple):
    field: str  # "u" or "v"
    j: int      # interior row, 0-based
    i: int      # interior column, 0-based


def random_samples(cfg: SolverConfig, count: int, rng: np.random.Generator) -> list[Sample]:
    picks = rng.choice(2 * cfg.nx * cfg.ny, size=count, replace=False)
    out = []
    for p in picks:
        f, rest = divmod(int(p), cfg.nx * cfg.ny)
        j, i = divmod(rest, cfg.nx)
        out.append(Sample("uv"[f], j, i))
    return out


def finite_difference_gradient(cfg: SolverConfig, samples: list[Sample], h: float = 1e-6,
                               robust: bool = True) -> np.ndarray:
    """(J(x + h e_k) - J(x - h e_k)) / 2h for every sample, with h scaled by max(1, |x_k|).

    With ``robust`` the numerator is formed as (J+^2 - J-^2) / (J+ + J-), summing
    the per-cell differences of squares so that the unaffected cells cancel
    exactly instead of in the final subtraction.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    u, v = initial_arrays(cfg)
    base = {"u": u[1:-1, 1:-1], "v": v[1:-1, 1:-1]}
    out = np.empty(len(samples))
    for n, (name, j, i) in enumerate(samples):
        step = h * max(1.0, abs(base[name][j, i]))
        runs = []
        for sign in (1.0, -1.0):
            init = {k: a.copy() for k, a in base.items()}
            init[name][j, i] += sign * step
            runs.append(simulate(cfg, init["u"], init["v"]))
        (up, vp), (um, vm) = runs
        jp, jm = objective_arrays(up, vp, cfg), objective_arrays(um, vm, cfg)
        if robust:
            du = (up - um)[1:-1, 1:-1] * (up + um)[1:-1, 1:-1]
            dv = (vp - vm)[1:-1, 1:-1] * (vp + vm)[1:-1, 1:-1]
            diff = cfg.dx * cfg.dy * float(np.sum(du + dv)) / (jp + jm)
        else:
            diff = jp - jm
        out[n] = diff / (2.0 * step)
    return out


def pick(grad_u: np.ndarray, grad_v: np.ndarray, samples: list[Sample]) -> np.ndarray:
    grids = {"u": grad_u, "v": grad_v}
    return np.array([grids[s.field][s.j, s.i] for s in samples])


def relative_errors(reference: np.ndarray, value: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(reference), np.finfo(float).tiny)
    return np.abs(value - reference) / scale
