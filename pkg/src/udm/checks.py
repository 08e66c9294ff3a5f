"""Self-checks behind ``udm verify``: fast kernels against dense oracles."""

from __future__ import annotations

import numpy as np

from .denoiser import DenoiserSpec, GaussianAnalytic, GaussianPrior, LowRankAdapter, image_prior
from .numerics import RngStream
from .operators import (
    Blur,
    Masking,
    MeasurementModel,
    SuperResolution,
    build_bicubic_kernel,
    build_gaussian_kernel,
    build_random_mask,
)
from .prox import ProxContext, solve_sigma
from .schedule import build_linear_schedule
from .verification import dense_denoiser_mean, dense_prox_solve, relative_error


def random_linear_model(kind, dims, stream: RngStream, sigma):
    if kind == "deblur":
        size = 3 + 2 * int(stream.uniform(1)[0] * 3)
        return MeasurementModel(Blur(build_gaussian_kernel(size, 0.5 + 3 * stream.uniform(1)[0])), sigma)
    if kind == "inpaint":
        return MeasurementModel(Masking(build_random_mask(dims, 0.2 + 0.6 * stream.uniform(1)[0], stream)), sigma)
    if kind in ("sr2", "sr4"):
        s = int(kind[2:])
        return MeasurementModel(SuperResolution(build_bicubic_kernel(s), s), sigma)
    raise ValueError(kind)


def random_prox_instance(kind, stream: RngStream, dims=(16, 16), schedule=None):
    """Random ``(ctx, x)`` with log-uniform delta and sigma and uniform t."""
    schedule = build_linear_schedule() if schedule is None else schedule
    delta = float(10 ** (-3 + 3 * stream.uniform(1)[0]))
    sigma = float(10 ** (-2.5 + 2 * stream.uniform(1)[0]))
    t = 1 + int(stream.uniform(1)[0] * schedule.T)
    model = random_linear_model(kind, dims, stream, sigma)
    shape = (1, *dims)
    y = stream.gaussian(model.operator.output_shape(shape))
    ctx = ProxContext(delta, t, model, y, stream.gaussian(shape), schedule)
    return ctx, stream.gaussian(shape)


def check_prox(instances=200, seed=0, kinds=("deblur", "inpaint", "sr2", "sr4")):
    worst = {}
    for kind in kinds:
        for i in range(instances):
            ctx, x = random_prox_instance(kind, RngStream(seed, i).child(kinds.index(kind)))
            err = relative_error(solve_sigma(ctx, ctx.information(x)), dense_prox_solve(ctx, x))
            worst[kind] = max(worst.get(kind, 0.0), err)
    return [(f"prox_{k}", v <= 1e-8, f"max rel err {v:.2e}") for k, v in worst.items()]


def check_adjoints(pairs=100, seed=0, dims=(16, 16)):
    out = []
    for kind in ("deblur", "inpaint", "sr2", "sr4"):
        worst = 0.0
        for i in range(pairs):
            stream = RngStream(seed, i).child(7)
            op = random_linear_model(kind, dims, stream, 0.1).operator
            x = stream.gaussian((1, *dims))
            y = stream.gaussian(op.output_shape((1, *dims)))
            lhs = np.vdot(op.apply(x), y)
            rhs = np.vdot(x, op.adjoint(y))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        out.append((f"adjoint_{kind}", bool(worst <= 1e-10), f"max rel gap {worst:.2e}"))
    return out


def random_circulant_prior(stream: RngStream, shape=(1, 8, 8)) -> GaussianPrior:
    base = image_prior(shape, pixel_std=0.1 + 0.3 * stream.uniform(1)[0], corr_length=0.5 + 3 * stream.uniform(1)[0])
    return GaussianPrior(stream.uniform(shape), base.cov_spectrum)


def check_denoiser(instances=50, seed=0):
    schedule = build_linear_schedule()
    worst = 0.0
    for i in range(instances):
        stream = RngStream(seed, i).child(11)
        prior = random_circulant_prior(stream)
        t = 1 + int(stream.uniform(1)[0] * schedule.T)
        ab, _ = schedule.query(t)
        x_t = stream.gaussian(prior.shape)
        fast = GaussianAnalytic(prior).apply(x_t, ab)
        worst = max(worst, relative_error(fast, dense_denoiser_mean(prior, x_t, ab)))
    return [("denoiser_gaussian", worst <= 1e-10, f"max rel err {worst:.2e}")]


def check_schedule():
    s = build_linear_schedule()
    ok = (
        s.beta[0] == 1e-4
        and s.beta[s.T - 1] == 0.02
        and bool(np.all(np.diff(s.alpha_bar) < 0))
        and bool(np.all(np.diff(s.sigma_t_sq) > 0))
    )
    return [("schedule_endpoints", ok, f"beta_1={s.beta[0]}, beta_T={s.beta[-1]}")]


def check_gradients(instances=5, seed=0):
    """Central differences on small random chains (d = 16, r = 2, K = 2)."""
    from .sampler import UnfoldedSamplerConfig
    from .training import TrainState, draw_batch, grad_l2, l2_loss

    schedule = build_linear_schedule()
    worst = 0.0
    for i in range(instances):
        stream = RngStream(seed, i).child(13)
        prior = image_prior((1, 4, 4))
        model = random_linear_model("deblur", (4, 4), stream, 0.1)
        cfg = UnfoldedSamplerConfig(DenoiserSpec(GaussianAnalytic(prior.scaled(0.5)), schedule), K=2)
        adapter = LowRankAdapter(0.3 * stream.gaussian((16, 2)), 0.3 * stream.gaussian((16, 2)), 1.0)
        state = TrainState(adapter, (0.5, 0.5))
        batch = draw_batch(prior, model, cfg, 2, seed, i)
        _, g = grad_l2(state, batch, model, cfg)
        worst = max(worst, finite_difference_error(state, batch, model, cfg, g, l2_loss))
    return [("grad_l2_fd", worst <= 1e-5, f"max rel err {worst:.2e}")]


def finite_difference_error(state, batch, model, cfg, grads, loss_fn, h=1e-5):
    """Largest per-coordinate relative gap between ``grads`` and central
    differences. The denominator of a coordinate is floored at 1e-3 times
    the largest entry of its block, so near-zero entries are not judged on
    difference-quotient rounding noise alone."""
    from .training import TrainState

    def loss_with(adapter=None, weights=None):
        s = TrainState(adapter or state.adapter, weights or state.init_weights)
        return loss_fn(s, batch, model, cfg)

    worst = 0.0
    for name in ("U", "V"):
        block = grads[name]
        floor = max(1e-3 * np.abs(block).max(), 1e-12)
        for idx in np.ndindex(block.shape):
            plus, minus = state.adapter.copy(), state.adapter.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            fd = (loss_with(plus) - loss_with(minus)) / (2 * h)
            worst = max(worst, abs(fd - block[idx]) / max(abs(block[idx]), abs(fd), floor))
    plus, minus = state.adapter.copy(), state.adapter.copy()
    plus.gate = float(plus.gate) + h
    minus.gate = float(minus.gate) - h
    fd = (loss_with(plus) - loss_with(minus)) / (2 * h)
    worst = max(worst, abs(fd - grads["gate"]) / max(abs(grads["gate"]), 1e-12))
    for i, key in enumerate(("w_y", "w_x")):
        wp, wm = list(state.init_weights), list(state.init_weights)
        wp[i] += h
        wm[i] -= h
        fd = (loss_with(weights=tuple(wp)) - loss_with(weights=tuple(wm))) / (2 * h)
        worst = max(worst, abs(fd - grads[key]) / max(abs(grads[key]), 1e-12))
    return worst


CHECKS = {
    "prox": lambda: check_prox(),
    "adjoint": lambda: check_adjoints(),
    "denoiser": lambda: check_denoiser(),
    "schedule": lambda: check_schedule(),
    "grad": lambda: check_gradients(),
}


def run_checks(which="all"):
    names = list(CHECKS) if which == "all" else [which]
    results = []
    for name in names:
        results.extend((label, bool(ok), detail) for label, ok, detail in CHECKS[name]())
    return results
