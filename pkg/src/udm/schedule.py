"""Discrete diffusion time: linear beta schedule, time grids, forward noising."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UdmError


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables over ``T`` steps.

    ``beta[t-1]`` is the variance increment of step ``t`` (1-based, as in
    the usual DDPM notation). ``alpha_bar`` and ``sigma_t_sq`` have ``T + 1``
    entries with index 0 being the noiseless state.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma_t_sq: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def query(self, t: int) -> tuple[float, float]:
        """Return ``(alpha_bar_t, sigma_t^2)`` for ``0 <= t <= T``."""
        t = int(t)
        if not 0 <= t <= self.T:
            raise UdmError(f"step {t} outside [0, {self.T}]", code="bad_step")
        return float(self.alpha_bar[t]), float(self.sigma_t_sq[t])


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise UdmError("beta must be a non-empty vector", code="bad_schedule")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise UdmError("beta values must lie strictly inside (0, 1)", code="bad_schedule")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    sigma_t_sq = (1.0 - alpha_bar) / alpha_bar
    for arr in (beta, alpha_bar, sigma_t_sq):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha_bar, sigma_t_sq)


def build_linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if T < 1:
        raise UdmError("T must be at least 1", code="bad_schedule")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise UdmError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}",
            code="bad_schedule",
        )
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def query(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    return schedule.query(t)


def noise_to(x0, t, eps, schedule: NoiseSchedule):
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise UdmError(f"eps shape {eps.shape} != x0 shape {x0.shape}", code="shape_mismatch")
    ab, _ = schedule.query(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def make_time_grid(schedule_or_T, N, spacing="uniform") -> np.ndarray:
    """Return ``N + 1`` strictly increasing integer steps from 0 to T."""
    T = schedule_or_T.T if isinstance(schedule_or_T, NoiseSchedule) else int(schedule_or_T)
    if not 1 <= N <= T:
        raise UdmError(f"need 1 <= N <= T, got N={N}, T={T}", code="bad_grid")
    u = np.arange(N + 1) / N
    if spacing == "uniform":
        raw = u * T
    elif spacing == "quadratic":
        raw = u**2 * T
    else:
        raise UdmError(f"unknown grid spacing {spacing!r}", code="bad_grid")
    times = np.floor(raw + 0.5).astype(np.int64)
    times[0], times[-1] = 0, T
    for i in range(1, N + 1):
        times[i] = max(times[i], times[i - 1] + 1)
    # a forward bump can overrun T near the end; pull back from the top
    for i in range(N - 1, 0, -1):
        times[i] = min(times[i], times[i + 1] - 1)
    return times


def default_t_delta(schedule: NoiseSchedule, target_alpha_bar=0.98) -> int:
    """Step whose ``alpha_bar`` is closest to ``target_alpha_bar`` (t >= 1)."""
    t = int(np.argmin(np.abs(schedule.alpha_bar[1:] - target_alpha_bar))) + 1
    return t


def t_for_sigma_sq(schedule: NoiseSchedule, sigma_sq: float) -> int:
    """Step whose ``sigma_t^2`` is closest to ``sigma_sq`` (t >= 1)."""
    return int(np.argmin(np.abs(schedule.sigma_t_sq[1:] - sigma_sq))) + 1
