"""Command line driver: solve, differentiate, check and benchmark.

Exit status is 0 on success, 2 when the gradient check fails and 3 when the
configuration is numerically unstable.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys

import numpy as np

import parad
from ..tape import ContractError
from .adjoint import record_and_reverse, validate
from .bench import benchmark, write_csv
from .check import finite_difference_gradient, pick, random_samples, relative_errors
from .solver import LARGE_SCALE, AdjointConfig, SolverConfig, StabilityError

EXIT_GRADIENT = 2
EXIT_STABILITY = 3

log = logging.getLogger("burgers")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="burgers-ad", description=__doc__.splitlines()[0])
    g = p.add_argument_group("problem")
    g.add_argument("--nx", type=int, help="cells in x (default 64)")
    g.add_argument("--ny", type=int, help="cells in y (default 64)")
    g.add_argument("--steps", type=int, help="time steps (default 10)")
    g.add_argument("--dt", type=float, help="time step (default 1e-4)")
    g.add_argument("--domain-size", type=float, help="edge length L of [0, L]^2 (default 2)")
    g.add_argument("--reynolds", type=float, help="R (default 1)")
    g.add_argument("--paper-scale", action="store_true",
                   help="2000x2000 cells on [0, 50]^2 for 20 steps; explicit flags still win")
    g = p.add_argument_group("parallelism")
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--adjoint-mode", choices=[c.value for c in AdjointConfig], default="atomic")
    g.add_argument("--trace", metavar="PATH", help="write the AD event trace here")
    g = p.add_argument_group("gradient check")
    g.add_argument("--check-gradient", action="store_true")
    g.add_argument("--fd-h", type=float, default=1e-6)
    g.add_argument("--samples", type=int, default=10)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g = p.add_argument_group("benchmark")
    g.add_argument("--bench", action="store_true", help="time all adjoint modes")
    g.add_argument("--bench-threads", default=None,
                   help="comma separated team sizes (default 1 and --threads)")
    g.add_argument("--reps", type=int, default=3)
    g.add_argument("--warmups", type=int, default=1)
    g.add_argument("--csv", metavar="PATH", help="benchmark CSV destination (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> SolverConfig:
    base = dict(LARGE_SCALE) if args.paper_scale else {}
    given = dict(nx=args.nx, ny=args.ny, steps=args.steps, dt=args.dt,
                 length=args.domain_size, reynolds=args.reynolds)
    base.update({k: v for k, v in given.items() if v is not None})
    return SolverConfig(threads=args.threads, adjoint=AdjointConfig(args.adjoint_mode), **base)


def check_gradient(cfg: SolverConfig, result, samples: int, h: float, tol: float, seed: int) -> bool:
    picks = random_samples(cfg, samples, np.random.default_rng(seed))
    fd = finite_difference_gradient(cfg, picks, h)
    ad = pick(result.grad_u, result.grad_v, picks)
    errs = relative_errors(fd, ad)
    for s, a, f, e in zip(picks, ad, fd, errs):
        print(f"  d J / d {s.field}[{s.j},{s.i}]  reverse={a:+.12e}  fd={f:+.12e}  rel={e:.2e}")
    ok = bool(np.all(errs < tol))
    print(f"gradient check: {'ok' if ok else 'FAILED'} (max rel error {errs.max():.2e}, tol {tol:g})")
    return ok


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)
    try:
        validate(cfg)
    except StabilityError as exc:
        print(f"stability check failed: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except (ContractError, ValueError) as exc:
        parser.error(str(exc))

    with contextlib.ExitStack() as stack:
        trace = stack.enter_context(open(args.trace, "w")) if args.trace else None
        stack.enter_context(parad.session(trace=trace))
        if args.bench:
            counts = ([int(t) for t in args.bench_threads.split(",")] if args.bench_threads
                      else [1, cfg.threads])
            rows = benchmark(cfg, list(AdjointConfig), counts, args.reps, args.warmups)
            if args.csv:
                with open(args.csv, "w", newline="") as out:
                    write_csv(rows, out)
                print(f"wrote {len(rows)} rows to {args.csv}")
            else:
                write_csv(rows, sys.stdout)
            return 0

        try:
            result = record_and_reverse(cfg)
        except StabilityError as exc:
            print(f"stability check failed: {exc}", file=sys.stderr)
            return EXIT_STABILITY
        norm = float(np.sqrt(np.sum(result.grad_u ** 2) + np.sum(result.grad_v ** 2)))
        print(f"grid {cfg.nx}x{cfg.ny} on [0,{cfg.length:g}]^2, {cfg.steps} steps, dt={cfg.dt:g}, "
              f"R={cfg.reynolds:g}, {cfg.threads} thread(s), {cfg.adjoint.value} adjoints")
        print(f"J = {result.value:.15g}")
        print(f"|dJ/d(u0,v0)| = {norm:.15g}")
        print(f"statements {result.statements}, block boundary reads {result.boundary_reads}")
        print(f"forward {result.forward_s:.4f} s, reverse {result.reverse_s:.4f} s")
        if args.check_gradient:
            ok = check_gradient(cfg, result, args.samples, args.fd_h, args.tolerance, args.seed)
            if not ok:
                return EXIT_GRADIENT
    return 0


if __name__ == "__main__":
    sys.exit(main())
