"""Micro-benchmarks: structured prox solves against CG and dense solves,
and the sampler's wall time per network evaluation."""

from __future__ import annotations

import math
import statistics
import time

import numpy as np

from .errors import UdmError
from .numerics import RngStream, conjugate_gradient
from .operators import (
    Blur,
    Masking,
    MeasurementModel,
    SuperResolution,
    build_bicubic_kernel,
    build_gaussian_kernel,
    build_random_mask,
)
from .prox import ProxContext, apply_sigma, solve_sigma
from .sampler import conditional_diffusion_sample
from .schedule import build_linear_schedule, make_time_grid
from .verification import MAX_DENSE_DIM, dense_prox_solve, relative_error

BENCH_OPERATORS = ("deblur", "inpaint", "sr2", "sr4")
CG_TOL = 1e-8
MATCH_TOL = 1e-8


def time_call(fn, repeats=5):
    """Median and min wall time in ms over ``repeats`` runs after one warmup."""
    if repeats < 5:
        raise UdmError("need at least 5 repetitions", code="bad_repeats")
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times), min(times)


def bench_operator(name, dims, stream: RngStream):
    h, w = dims
    if name == "deblur":
        return Blur(build_gaussian_kernel(5, 1.0)), "gauss5_bw1"
    if name == "inpaint":
        return Masking(build_random_mask((h, w), 0.7, stream)), "random70"
    if name in ("sr2", "sr4"):
        s = int(name[2:])
        return SuperResolution(build_bicubic_kernel(s), s), f"bicubic_x{s}"
    raise UdmError(f"unknown bench operator {name!r}", code="bad_task")


def prox_case(name, dims, sigma=0.01, delta=0.02, t=500, seed=0):
    """A random prox problem ``(ctx, x)`` on a 1 x H x W image."""
    stream = RngStream(seed, 0)
    op, kernel = bench_operator(name, dims, stream)
    shape = (1, *dims)
    model = MeasurementModel(op, sigma)
    y = stream.uniform(op.output_shape(shape))
    x_t = stream.gaussian(shape)
    x = stream.uniform(shape)
    ctx = ProxContext(delta, t, model, y, x_t, build_linear_schedule())
    return ctx, x, kernel


def bench_prox(dims_list, operators=BENCH_OPERATORS, repeats=5, sigma=0.01):
    """Rows comparing the fast path, CG (tol 1e-8) and dense solves.

    Each case first checks that the solvers agree to 1e-8 relative; the
    reference for that check is CG run to 1e-11 (and the dense solve when
    d <= 4096), since CG stopped at 1e-8 on the residual is only accurate
    to about cond(Sigma) * 1e-8.
    """
    rows = []
    for dims in dims_list:
        dims = tuple(dims)
        for name in operators:
            ctx, x, kernel = prox_case(name, dims, sigma)
            rhs = ctx.information(x)
            fast = solve_sigma(ctx, rhs)
            ref, _ = conjugate_gradient(lambda u: apply_sigma(ctx, u), rhs, tol=1e-11, max_iter=5000)
            err = relative_error(fast, ref)
            d = int(np.prod(dims))
            if d <= MAX_DENSE_DIM:
                err = max(err, relative_error(fast, dense_prox_solve(ctx, x)))
            if not err <= MATCH_TOL:
                raise UdmError(f"{name} {dims}: solvers disagree ({err:.2e})", code="bench_mismatch")

            iters = {}

            def run_cg():
                rhs_ = ctx.information(x)
                _, iters["cg"] = conjugate_gradient(lambda u: apply_sigma(ctx, u), rhs_, tol=CG_TOL, max_iter=20000)

            def run_fast():
                solve_sigma(ctx, ctx.information(x))

            solvers = [("fast", run_fast), ("cg", run_cg)]
            if d <= MAX_DENSE_DIM:
                solvers.append(("dense", lambda: dense_prox_solve(ctx, x)))
            medians = {}
            for solver, fn in solvers:
                med, best = time_call(fn, repeats)
                medians[solver] = med
                rows.append(
                    {
                        "case": f"{name}_{dims[0]}x{dims[1]}",
                        "dims": f"1x{dims[0]}x{dims[1]}",
                        "kernel": kernel,
                        "solver": solver,
                        "median_ms": med,
                        "min_ms": best,
                        "repeats": repeats,
                        "iterations": iters.get("cg", "") if solver == "cg" else "",
                        "speedup_vs_fast": med / medians["fast"],
                        "max_rel_err": err,
                    }
                )
    return rows


def bench_sampler(grid, toy_config_fn, y, model, repeats=5, seed=0):
    """Wall time and NFE per ``(K, N)`` point.

    ``toy_config_fn(K)`` builds the sampler config. Returns ``(rows, fit)``
    where ``fit`` holds the slope/intercept of median wall time against K*N
    and the largest relative deviation of a point from that line.
    """
    schedule = build_linear_schedule()
    rows = []
    for K, N in grid:
        cfg = toy_config_fn(K)
        grid_t = make_time_grid(schedule, N)
        _, counter = conditional_diffusion_sample(y, model, grid_t, cfg, seed)
        if counter.denoiser_evals != K * N:
            raise UdmError(f"NFE {counter.denoiser_evals} != K*N = {K * N}", code="nfe_mismatch")
        med, best = time_call(lambda: conditional_diffusion_sample(y, model, grid_t, cfg, seed), repeats)
        rows.append(
            {
                "case": f"sampler_K{K}_N{N}",
                "K": K,
                "N": N,
                "nfe_denoiser": counter.denoiser_evals,
                "nfe_init": counter.initializer_evals,
                "median_ms": med,
                "min_ms": best,
                "repeats": repeats,
            }
        )
    x = np.array([r["K"] * r["N"] for r in rows], dtype=np.float64)
    t = np.array([r["median_ms"] for r in rows])
    fit = {"slope": math.nan, "intercept": math.nan, "max_rel_dev": math.nan}
    if len(set(x)) >= 2:
        slope, intercept = np.polyfit(x, t, 1)
        fit = {"slope": slope, "intercept": intercept, "max_rel_dev": float(np.max(np.abs(slope * x + intercept - t) / t))}
    return rows, fit
