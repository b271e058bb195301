"""Coupled 2D Burgers' equations on a cell-centred grid.

    u_t + u u_x + v u_y = (u_xx + u_yy) / R
    v_t + u v_x + v v_y = (v_xx + v_yy) / R

Convection is donor-cell upwinded by the sign of the advecting velocity,
diffusion uses centred second differences and time stepping is explicit
Euler. The ghost ring around the interior is refreshed from the exact
solution after every step.

Fields are flat row-major lists with rows padded to a multiple of eight
entries; cell ``(j, i)`` lives at ``j * stride + i`` with ghost rows and
columns at index 0 and ``n + 1``. The same stencil code runs on floats and
on :class:`parad.ActiveScalar`; :func:`simulate` is a vectorized primal used
as a finite-difference oracle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .. import tape as _tape

ROW_ALIGN = 8


class StabilityError(RuntimeError):
    pass


class AdjointConfig(enum.Enum):
    ATOMIC = "atomic"
    ACCESS_CONTROL = "access-control"
    CLASSICAL = "classical"


@dataclass(frozen=True)
class SolverConfig:
    nx: int = 64
    ny: int = 64
    length: float = 2.0
    dt: float = 1e-4
    steps: int = 10
    reynolds: float = 1.0
    threads: int = 1
    adjoint: AdjointConfig = AdjointConfig.ATOMIC
    safety: float = 1.0

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def dy(self) -> float:
        return self.length / self.ny

    @property
    def stride(self) -> int:
        return -(-(self.nx + 2) // ROW_ALIGN) * ROW_ALIGN

    @property
    def size(self) -> int:
        return (self.ny + 2) * self.stride

    @property
    def final_time(self) -> float:
        return self.steps * self.dt

    def with_(self, **changes) -> SolverConfig:
        return replace(self, **changes)


LARGE_SCALE = dict(nx=2000, ny=2000, length=50.0, dt=1e-4, steps=20, reynolds=1.0)


def exact(x, y, t: float):
    d = 1.0 - 2.0 * t * t
    return (x + y - 2.0 * x * t) / d, (x - y - 2.0 * y * t) / d


def centres(n: int, h: float) -> np.ndarray:
    """Cell centres including one ghost cell on either side."""
    return (np.arange(n + 2) - 0.5) * h


def max_speed(cfg: SolverConfig) -> float:
    x = centres(cfg.nx, cfg.dx)[None, :]
    y = centres(cfg.ny, cfg.dy)[:, None]
    # the exact field is linear in space, so the extremes over time sit at the corners
    return max(float(np.max(np.abs(np.stack(exact(x, y, t))))) for t in (0.0, cfg.final_time))


def check_stability(cfg: SolverConfig) -> None:
    if cfg.nx < 1 or cfg.ny < 1 or cfg.steps < 0 or cfg.dt <= 0 or cfg.reynolds <= 0:
        raise ValueError(f"invalid configuration {cfg}")
    if 2.0 * cfg.final_time ** 2 >= 1.0:
        raise StabilityError(f"exact solution blows up before t={cfg.final_time}")
    h = min(cfg.dx, cfg.dy)
    umax = max_speed(cfg)
    bound = cfg.safety * min(h / umax if umax else math.inf, h * h * cfg.reynolds / 4.0)
    if cfg.dt > bound:
        raise StabilityError(
            f"dt={cfg.dt:g} exceeds the stable limit {bound:.3g} "
            f"(dx={h:.3g}, max speed {umax:.3g}, R={cfg.reynolds:g})")


# -- flat fields -------------------------------------------------------------


def initial_fields(cfg: SolverConfig) -> tuple[list, list]:
    return ring_fields(cfg, 0.0, interior=True)


def ring_fields(cfg: SolverConfig, t: float, interior: bool = False) -> tuple[list, list]:
    """Fields holding the exact solution at ``t`` on the ghost ring (and optionally inside)."""
    s = cfg.stride
    xs = centres(cfg.nx, cfg.dx)
    ys = centres(cfg.ny, cfg.dy)
    ue, ve = exact(xs[None, :], ys[:, None], t)
    u = np.zeros((cfg.ny + 2, s))
    v = np.zeros((cfg.ny + 2, s))
    if interior:
        u[:, :cfg.nx + 2] = ue
        v[:, :cfg.nx + 2] = ve
    else:
        for dst, src in ((u, ue), (v, ve)):
            dst[0, :cfg.nx + 2] = src[0]
            dst[-1, :cfg.nx + 2] = src[-1]
            dst[:, 0] = src[:, 0]
            dst[:, cfg.nx + 1] = src[:, -1]
    return u.ravel().tolist(), v.ravel().tolist()


def interior_indices(cfg: SolverConfig) -> list[int]:
    s = cfg.stride
    return [j * s + i for j in range(1, cfg.ny + 1) for i in range(1, cfg.nx + 1)]


@dataclass(frozen=True)
class Coefficients:
    stride: int
    nx: int
    cx: float
    cy: float
    kx: float
    ky: float

    @classmethod
    def of(cls, cfg: SolverConfig) -> Coefficients:
        return cls(cfg.stride, cfg.nx, cfg.dt / cfg.dx, cfg.dt / cfg.dy,
                   cfg.dt / (cfg.reynolds * cfg.dx ** 2), cfg.dt / (cfg.reynolds * cfg.dy ** 2))


def update_row(u: list, v: list, u_new: list, v_new: list, j: int, c: Coefficients) -> None:
    """Advance the interior cells of row ``j`` by one step."""
    s, cx, cy, kx, ky = c.stride, c.cx, c.cy, c.kx, c.ky
    base = j * s
    for k in range(base + 1, base + c.nx + 1):
        uc = u[k]
        vc = v[k]
        uw = u[k - 1]
        ue = u[k + 1]
        us = u[k - s]
        un = u[k + s]
        vw = v[k - 1]
        ve = v[k + 1]
        vs = v[k - s]
        vn = v[k + s]
        if uc > 0:
            dux = uc - uw
            dvx = vc - vw
        else:
            dux = ue - uc
            dvx = ve - vc
        if vc > 0:
            duy = uc - us
            dvy = vc - vs
        else:
            duy = un - uc
            dvy = vn - vc
        u2 = 2.0 * uc
        v2 = 2.0 * vc
        u_new[k] = (uc - cx * uc * dux - cy * vc * duy
                    + kx * (ue - u2 + uw) + ky * (un - u2 + us))
        v_new[k] = (vc - cx * uc * dvx - cy * vc * dvy
                    + kx * (ve - v2 + vw) + ky * (vn - v2 + vs))


def step(u: list, v: list, cfg: SolverConfig, n: int) -> tuple[list, list]:
    """Serial step ``n -> n + 1`` on flat fields."""
    u_new, v_new = ring_fields(cfg, (n + 1) * cfg.dt)
    c = Coefficients.of(cfg)
    for j in range(1, cfg.ny + 1):
        update_row(u, v, u_new, v_new, j, c)
    return u_new, v_new


def objective(u: list, v: list, cfg: SolverConfig):
    """Discrete L2 norm of the interior velocity field."""
    acc = 0.0
    for k in interior_indices(cfg):
        acc = acc + u[k] * u[k] + v[k] * v[k]
    return _sqrt(cfg.dx * cfg.dy * acc)


def _sqrt(x):
    return _tape.sqrt(x) if isinstance(x, _tape.ActiveScalar) else math.sqrt(x)


# -- vectorized primal -------------------------------------------------------


def initial_arrays(cfg: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    xs = centres(cfg.nx, cfg.dx)
    ys = centres(cfg.ny, cfg.dy)
    return exact(xs[None, :], ys[:, None], 0.0)


def step_arrays(u: np.ndarray, v: np.ndarray, cfg: SolverConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """One step on ``(ny + 2, nx + 2)`` arrays; same arithmetic as :func:`update_row`."""
    c = Coefficients.of(cfg)
    uc, vc = u[1:-1, 1:-1], v[1:-1, 1:-1]
    uw, ue, us, un = u[1:-1, :-2], u[1:-1, 2:], u[:-2, 1:-1], u[2:, 1:-1]
    vw, ve, vs, vn = v[1:-1, :-2], v[1:-1, 2:], v[:-2, 1:-1], v[2:, 1:-1]
    px = uc > 0
    py = vc > 0
    dux = np.where(px, uc - uw, ue - uc)
    dvx = np.where(px, vc - vw, ve - vc)
    duy = np.where(py, uc - us, un - uc)
    dvy = np.where(py, vc - vs, vn - vc)
    u2 = 2.0 * uc
    v2 = 2.0 * vc
    xs = centres(cfg.nx, cfg.dx)
    ys = centres(cfg.ny, cfg.dy)
    u_new, v_new = exact(xs[None, :], ys[:, None], (n + 1) * cfg.dt)
    with np.errstate(invalid="ignore", over="ignore"):
        u_new[1:-1, 1:-1] = (uc - c.cx * uc * dux - c.cy * vc * duy
                             + c.kx * (ue - u2 + uw) + c.ky * (un - u2 + us))
        v_new[1:-1, 1:-1] = (vc - c.cx * uc * dvx - c.cy * vc * dvy
                             + c.kx * (ve - v2 + vw) + c.ky * (vn - v2 + vs))
    if not (np.isfinite(u_new).all() and np.isfinite(v_new).all()):
        raise StabilityError(f"non-finite field after step {n + 1}; reduce dt")
    return u_new, v_new


def simulate(cfg: SolverConfig, u0: np.ndarray | None = None,
             v0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run all steps; ``u0``/``v0`` override the initial interior ``(ny, nx)``."""
    u, v = initial_arrays(cfg)
    if u0 is not None:
        u[1:-1, 1:-1] = u0
    if v0 is not None:
        v[1:-1, 1:-1] = v0
    for n in range(cfg.steps):
        u, v = step_arrays(u, v, cfg, n)
    return u, v


def objective_squared_parts(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    ui, vi = u[1:-1, 1:-1], v[1:-1, 1:-1]
    return ui * ui + vi * vi


def objective_arrays(u: np.ndarray, v: np.ndarray, cfg: SolverConfig) -> float:
    return math.sqrt(cfg.dx * cfg.dy * float(np.sum(objective_squared_parts(u, v))))
