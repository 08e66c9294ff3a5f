"""Proximal operator of the joint likelihood of ``(y, x_t)`` given ``x0``.

For a linear Gaussian model the prox is a single linear solve

    Sigma x0 = A^T y / sigma^2 + x_t / (sqrt(ab_t) sigma_t^2) + x / delta,
    Sigma    = A^T A / sigma^2 + I / sigma_t^2 + I / delta,

and each operator family gets a structured solver for ``Sigma``: Fourier
division for circular blurs, a per-pixel division for masks and a Woodbury
solve over aliased frequencies for blur-then-decimate. Without an ``x_t``
term (``ProxContext.x_t is None``) the same code gives the plain
likelihood prox used by zero-shot LATINO.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProxDiverged, UdmError
from .numerics import conjugate_gradient, fft2, ifft2
from .operators import (
    Blur,
    Jpeg,
    Masking,
    MeasurementModel,
    SuperResolution,
    fold_aliases,
    jpeg_soft_vjp,
)
from .schedule import NoiseSchedule

MIN_SIGMA = 1e-6


@dataclass(frozen=True)
class AdamSettings:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0 or self.steps < 1:
            raise UdmError("Adam needs learning_rate > 0 and steps >= 1", code="bad_adam")


@dataclass(frozen=True)
class ProxContext:
    delta: float
    t: int
    model: MeasurementModel
    y: np.ndarray
    x_t: np.ndarray | None
    schedule: NoiseSchedule

    def __post_init__(self):
        if not self.delta > 0:
            raise UdmError(f"delta must be positive, got {self.delta}", code="bad_delta")
        if self.x_t is not None and self.t < 1:
            raise UdmError("the x_t term needs t >= 1 (sigma_t^2 > 0)", code="bad_step")
        if self.model.is_linear and self.model.sigma < MIN_SIGMA:
            raise UdmError(
                f"sigma={self.model.sigma} is below {MIN_SIGMA}; the data term is degenerate",
                code="degenerate_noise",
            )

    @property
    def alpha_bar(self) -> float:
        return self.schedule.query(self.t)[0]

    @property
    def sigma_t_sq(self) -> float:
        return self.schedule.query(self.t)[1]

    @property
    def shift(self) -> float:
        """Scalar part of ``Sigma``: ``1/sigma_t^2 + 1/delta``."""
        xt_precision = 0.0 if self.x_t is None else 1.0 / self.sigma_t_sq
        return xt_precision + 1.0 / self.delta

    def information(self, x):
        """Right-hand side of the prox normal equations (linear models)."""
        op = self.model.operator
        rhs = op.adjoint(self.y) / self.model.sigma**2 + x / self.delta
        if self.x_t is not None:
            rhs = rhs + self.x_t / (np.sqrt(self.alpha_bar) * self.sigma_t_sq)
        return rhs

    def objective(self, x0, anchor):
        """``g_{y,x_t}(x0) + ||x0 - anchor||^2 / (2 delta)``, summed over batch."""
        resid = self.y - self.model.operator.apply(x0)
        sigma_sq = max(self.model.sigma, MIN_SIGMA) ** 2
        value = 0.5 * np.sum(resid**2) / sigma_sq
        if self.x_t is not None:
            ab = self.alpha_bar
            value += 0.5 * np.sum((self.x_t - np.sqrt(ab) * x0) ** 2) / (1.0 - ab)
        return value + 0.5 * np.sum((x0 - anchor) ** 2) / self.delta


# --------------------------------------------------------------------------
# structured solves of Sigma u = v
# --------------------------------------------------------------------------


def solve_blur(ctx: ProxContext, v):
    spec = ctx.model.operator.kernel.spectrum(v.shape[-2:])
    denom = np.abs(spec) ** 2 / ctx.model.sigma**2 + ctx.shift
    return ifft2(fft2(v) / denom)


def solve_mask(ctx: ProxContext, v):
    a = ctx.model.operator.mask.values
    return v / (a / ctx.model.sigma**2 + ctx.shift)


def solve_sr(ctx: ProxContext, v):
    """Woodbury solve of ``(H^T S^T S H / sigma^2 + rho I) u = v``.

    With ``B = S H`` and ``rho`` the scalar shift,
    ``u = (v - B^T (sigma^2 rho I + B B^T)^{-1} B v) / rho``. In the unitary
    Fourier basis decimation sums the s^2 aliased frequencies (scaled by
    1/s) so ``B B^T`` is diagonal on the low-resolution grid.
    """
    op = ctx.model.operator
    s = op.factor
    rho = ctx.shift
    spec = op.kernel.spectrum(v.shape[-2:])
    v_hat = fft2(v)
    aliased_power = fold_aliases(np.abs(spec) ** 2, s).real
    low = fold_aliases(spec * v_hat, s) / (s**2 * ctx.model.sigma**2 * rho + aliased_power)
    tiled = np.tile(low, (1,) * (low.ndim - 2) + (s, s))
    return ifft2((v_hat - np.conj(spec) * tiled) / rho)


def apply_sigma(ctx: ProxContext, u):
    """Matrix-free ``Sigma u`` for linear models (used by CG and tests)."""
    op = ctx.model.operator
    return op.adjoint(op.apply(u)) / ctx.model.sigma**2 + ctx.shift * u


def solve_sigma_cg(ctx: ProxContext, v, tol=1e-12, max_iter=2000):
    u, _ = conjugate_gradient(lambda z: apply_sigma(ctx, z), v, tol=tol, max_iter=max_iter)
    return u


_FAST_SOLVERS = {Blur: solve_blur, Masking: solve_mask, SuperResolution: solve_sr}


def solve_sigma(ctx: ProxContext, v):
    """Apply ``Sigma^{-1}`` with the fastest exact solver available."""
    solver = _FAST_SOLVERS.get(type(ctx.model.operator))
    if solver is None:
        return solve_sigma_cg(ctx, v)
    return solver(ctx, v)


# --------------------------------------------------------------------------
# prox entry points
# --------------------------------------------------------------------------


def _require(ctx, kind):
    if not isinstance(ctx.model.operator, kind):
        raise UdmError(
            f"expected a {kind.__name__} operator, got {type(ctx.model.operator).__name__}",
            code="wrong_operator",
        )


def prox_deblur_fft(ctx: ProxContext, x):
    _require(ctx, Blur)
    return solve_blur(ctx, ctx.information(x))


def prox_inpaint_elementwise(ctx: ProxContext, x):
    _require(ctx, Masking)
    return solve_mask(ctx, ctx.information(x))


def prox_sr_woodbury(ctx: ProxContext, x):
    _require(ctx, SuperResolution)
    return solve_sr(ctx, ctx.information(x))


def prox_cg(ctx: ProxContext, x, tol=1e-12, max_iter=2000):
    """Generic matrix-free prox: conjugate gradient on ``Sigma``."""
    return solve_sigma_cg(ctx, ctx.information(x), tol=tol, max_iter=max_iter)


@dataclass
class IterativeProxResult:
    x: np.ndarray
    objective: float
    trace: list = field(default_factory=list)


def _objective_grad(ctx: ProxContext, x0, anchor):
    op = ctx.model.operator
    resid = op.apply(x0) - ctx.y
    sigma_sq = max(ctx.model.sigma, MIN_SIGMA) ** 2
    if isinstance(op, Jpeg):
        grad = jpeg_soft_vjp(x0, resid, op.quality) / sigma_sq
    else:
        grad = op.adjoint(resid) / sigma_sq
    if ctx.x_t is not None:
        ab = ctx.alpha_bar
        grad = grad - np.sqrt(ab) * (ctx.x_t - np.sqrt(ab) * x0) / (1.0 - ab)
    return grad + (x0 - anchor) / ctx.delta


def prox_iterative(ctx: ProxContext, x, settings: AdamSettings = AdamSettings()):
    """Approximate prox by Adam, warm-started at ``x``.

    Gradients of the JPEG data term use straight-through rounding while the
    objective itself is evaluated with hard rounding. Raises
    :class:`ProxDiverged` after 10 consecutive objective increases.
    """
    anchor = np.asarray(x, dtype=np.float64)
    x0 = anchor.copy()
    m = np.zeros_like(x0)
    v = np.zeros_like(x0)
    b1, b2 = settings.beta1, settings.beta2
    trace = [ctx.objective(x0, anchor)]
    best_x, best_f = x0, trace[0]
    rises = 0
    for k in range(1, settings.steps + 1):
        g = _objective_grad(ctx, x0, anchor)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**k)
        v_hat = v / (1 - b2**k)
        x0 = x0 - settings.learning_rate * m_hat / (np.sqrt(v_hat) + settings.epsilon)
        f = ctx.objective(x0, anchor)
        rises = rises + 1 if f > trace[-1] else 0
        trace.append(f)
        if not np.isfinite(f) or rises >= 10:
            raise ProxDiverged(f"objective rose for {rises} consecutive Adam steps (step {k})")
        if f < best_f:
            best_x, best_f = x0, f
    return IterativeProxResult(best_x, best_f, trace)


def prox_conditional(ctx: ProxContext, x, settings: AdamSettings | None = None):
    """Exact prox for linear models, Adam approximation otherwise."""
    x = np.asarray(x, dtype=np.float64)
    if not ctx.model.is_linear:
        return prox_iterative(ctx, x, settings or AdamSettings()).x
    return solve_sigma(ctx, ctx.information(x))
