"""Unfolded LATINO chain and the few-step conditional diffusion sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .denoiser import DenoiserSpec, denoise, initialize_first_module
from .errors import SamplerNaN, UdmError
from .numerics import RngStream
from .operators import MeasurementModel, pseudo_inverse_apply
from .prox import AdamSettings, ProxContext, prox_conditional
from .schedule import NoiseSchedule, default_t_delta, noise_to


@dataclass(frozen=True)
class UnfoldedSamplerConfig:
    denoiser: DenoiserSpec
    K: int = 3
    delta: Optional[float] = None
    t_delta: Optional[int] = None
    init_weights: tuple = (0.5, 0.5)
    fresh_noise_per_module: bool = True
    eta: float = 0.0
    adam: AdamSettings = AdamSettings()

    def __post_init__(self):
        T = self.denoiser.schedule.T
        t_delta = default_t_delta(self.denoiser.schedule) if self.t_delta is None else int(self.t_delta)
        if not 1 <= t_delta <= T:
            raise UdmError(f"t_delta must lie in [1, {T}]", code="bad_config")
        delta = float(self.denoiser.schedule.sigma_t_sq[t_delta]) if self.delta is None else float(self.delta)
        object.__setattr__(self, "t_delta", t_delta)
        object.__setattr__(self, "delta", delta)
        if self.K < 1:
            raise UdmError("K must be at least 1", code="bad_config")
        if not delta > 0:
            raise UdmError("delta must be positive", code="bad_config")
        if not 0.0 <= self.eta <= 1.0:
            raise UdmError("eta must lie in [0, 1]", code="bad_config")

    @property
    def schedule(self) -> NoiseSchedule:
        return self.denoiser.schedule


@dataclass
class NfeCounter:
    denoiser_evals: int = 0
    initializer_evals: int = 0
    prox_evals: int = 0

    @property
    def total(self) -> int:
        """Denoiser plus initializer calls, the convention of the w/ RAM rows."""
        return self.denoiser_evals + self.initializer_evals


def _check_finite(x, n, k):
    if not np.all(np.isfinite(x)):
        raise SamplerNaN(n, k)


def latino_module(x, ctx: ProxContext, config: UnfoldedSamplerConfig, stream: RngStream, counter=None, eps=None):
    """One LATINO step: likelihood prox, renoise to ``t_delta``, denoise."""
    x_tilde = prox_conditional(ctx, x, config.adam)
    if eps is None:
        eps = stream.gaussian(x_tilde.shape)
    noised = noise_to(x_tilde, config.t_delta, eps, config.schedule)
    out = denoise(config.denoiser, noised, config.t_delta)
    if counter is not None:
        counter.prox_evals += 1
        counter.denoiser_evals += 1
    return out


def unfolded_sample_x0(
    x_t, y, model: MeasurementModel, t, config: UnfoldedSamplerConfig, stream: RngStream, counter=None, n=None
):
    """Approximate draw from ``p(x0 | y, x_t)`` with K unfolded modules."""
    schedule = config.schedule
    if not 1 <= t <= schedule.T:
        raise UdmError(f"t={t} outside [1, {schedule.T}]", code="bad_step")
    x = initialize_first_module(y, x_t, t, model, schedule, config.init_weights)
    if counter is not None:
        counter.initializer_evals += 1
    ctx = ProxContext(config.delta, t, model, y, x_t, schedule)
    shared_eps = None if config.fresh_noise_per_module else stream.gaussian(x.shape)
    for k in range(config.K):
        x = latino_module(x, ctx, config, stream, counter, eps=shared_eps)
        _check_finite(x, n, k + 1)
    return x


def ddim_reverse_step(x_hat0, x_tn, t_n, t_prev, schedule: NoiseSchedule, eta=0.0, stream=None):
    """DDIM update from ``t_n`` to ``t_prev`` given an ``x0`` estimate."""
    if t_n < 1:
        raise UdmError("DDIM step needs t_n >= 1", code="bad_step")
    if not t_prev < t_n:
        raise UdmError("DDIM step needs t_prev < t_n", code="bad_step")
    ab_n, _ = schedule.query(t_n)
    ab_p, _ = schedule.query(t_prev)
    eps_hat = (x_tn - np.sqrt(ab_n) * x_hat0) / np.sqrt(1.0 - ab_n)
    if eta == 0.0:
        return np.sqrt(ab_p) * x_hat0 + np.sqrt(1.0 - ab_p) * eps_hat
    sig = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_n) * (1.0 - ab_n / ab_p))
    out = np.sqrt(ab_p) * x_hat0 + np.sqrt(1.0 - ab_p - sig**2) * eps_hat
    return out + sig * stream.gaussian(out.shape)


def conditional_diffusion_sample(
    y, model: MeasurementModel, grid, config: UnfoldedSamplerConfig, seed, chain=0, shape=None
):
    """Few-step conditional sampling; returns ``(x0, NfeCounter)``.

    All randomness for one chain comes from ``RngStream(seed, chain)``, so a
    chain's output depends only on its own id, never on scheduling.
    """
    grid = [int(t) for t in grid]
    schedule = config.schedule
    if grid[0] != 0 or grid[-1] != schedule.T or any(b <= a for a, b in zip(grid, grid[1:])):
        raise UdmError(f"invalid time grid {grid}", code="bad_grid")
    if shape is None:
        shape = config.denoiser.base.shape
    stream = RngStream(seed, chain)
    counter = NfeCounter()
    x = stream.gaussian(shape)
    for n in range(len(grid) - 1, 0, -1):
        x_hat0 = unfolded_sample_x0(x, y, model, grid[n], config, stream, counter, n=n)
        x = ddim_reverse_step(x_hat0, x, grid[n], grid[n - 1], schedule, config.eta, stream)
        _check_finite(x, n, 0)
    return x, counter


def zero_shot_latino(
    y,
    model: MeasurementModel,
    iterations,
    config: UnfoldedSamplerConfig,
    stream: RngStream,
    x_init=None,
    callback: Callable | None = None,
):
    """Plain LATINO targeting ``p(x0 | y)``: prox of ``g_y`` only.

    Starts from ``A^+ y`` unless ``x_init`` is given; ``callback(k, x)`` sees
    every iterate.
    """
    if iterations < 1:
        raise UdmError("iterations must be at least 1", code="bad_config")
    x = pseudo_inverse_apply(model, y) if x_init is None else np.asarray(x_init, dtype=np.float64)
    ctx = ProxContext(config.delta, config.t_delta, model, y, None, config.schedule)
    for k in range(1, iterations + 1):
        x = latino_module(x, ctx, config, stream)
        _check_finite(x, None, k)
        if callback is not None:
            callback(k, x)
    return x
