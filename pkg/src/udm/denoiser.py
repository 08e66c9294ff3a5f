"""Denoisers ``G(x_t, t) ~ E[x0 | x_t]`` and the first-module initializer.

The exact denoiser of a Gaussian prior with circulant covariance is diagonal
in the Fourier basis. Fine-tuning is modelled by a low-rank additive
correction ``gate * U (V^T x_t)`` acting on the flattened input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .errors import UdmError
from .numerics import RngStream, fft2, ifft2
from .operators import MeasurementModel, pseudo_inverse_apply
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GaussianPrior:
    """``N(mean, C)`` with ``C = F^H diag(cov_spectrum) F`` (unitary ``F``).

    ``cov_spectrum`` has shape ``(H, W)`` (shared by all channels) or
    ``(C, H, W)``. It must be real, nonnegative and symmetric under
    ``w -> -w`` so that ``C`` is a real matrix.
    """

    mean: np.ndarray
    cov_spectrum: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cov_spectrum, dtype=np.float64)
        if np.any(c < 0):
            raise UdmError("covariance spectrum must be nonnegative", code="bad_prior")
        flipped = np.roll(np.flip(c, axis=(-2, -1)), 1, axis=(-2, -1))
        if not np.allclose(c, flipped, rtol=1e-12, atol=1e-15):
            raise UdmError("covariance spectrum is not symmetric", code="bad_prior")
        mean = np.asarray(self.mean, dtype=np.float64)
        object.__setattr__(self, "cov_spectrum", c)
        object.__setattr__(self, "mean", mean)

    @property
    def shape(self):
        return self.mean.shape

    def scaled(self, factor) -> "GaussianPrior":
        return GaussianPrior(self.mean, self.cov_spectrum * factor)

    def sample(self, stream: RngStream, batch=()):
        batch = tuple(batch) if not isinstance(batch, int) else (batch,)
        white = stream.gaussian(batch + self.mean.shape)
        return self.mean + ifft2(np.sqrt(self.cov_spectrum) * fft2(white))

    def dense_covariance(self):
        d = self.mean.size
        eye = np.eye(d).reshape(d, *self.mean.shape)
        return ifft2(self.cov_spectrum * fft2(eye)).reshape(d, d)


def image_prior(shape, mean=0.5, pixel_std=0.2, corr_length=2.0, power=1.5) -> GaussianPrior:
    """Stationary prior with a decaying power spectrum, a crude stand-in for
    natural images: ``c(w) ~ (1 + (corr_length |w|)^2)^(-power)``, scaled so
    each pixel has standard deviation ``pixel_std``."""
    h, w = shape[-2:]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius_sq = (2 * np.pi) ** 2 * (fy**2 + fx**2)
    c = (1.0 + corr_length**2 * radius_sq) ** (-power)
    c *= pixel_std**2 / c.mean()
    return GaussianPrior(np.full(shape, float(mean)), c)


@dataclass
class LowRankAdapter:
    U: np.ndarray
    V: np.ndarray
    gate: Union[float, np.ndarray] = 1.0

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.U.shape != self.V.shape or self.U.shape[1] < 1:
            raise UdmError("U and V must both be d x r with r >= 1", code="bad_adapter")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.V))):
            raise UdmError("adapter weights must be finite", code="bad_adapter")

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    def gate_at(self, t) -> float:
        if np.ndim(self.gate) == 0:
            return float(self.gate)
        return float(self.gate[t])

    def apply(self, x, t):
        lead = x.shape[:-3]
        flat = x.reshape(*lead, self.dim)
        out = (flat @ self.V) @ self.U.T
        return self.gate_at(t) * out.reshape(x.shape)

    def copy(self) -> "LowRankAdapter":
        gate = self.gate if np.ndim(self.gate) == 0 else np.array(self.gate)
        return LowRankAdapter(self.U.copy(), self.V.copy(), gate)


def init_adapter(dim, rank, stream: RngStream, scale=None) -> LowRankAdapter:
    """LoRA-style start: ``U = 0`` and Gaussian ``V``, so the correction is zero."""
    scale = 1.0 / np.sqrt(dim) if scale is None else scale
    return LowRankAdapter(np.zeros((dim, rank)), scale * stream.gaussian((dim, rank)), 1.0)


@dataclass(frozen=True)
class GaussianAnalytic:
    prior: GaussianPrior

    @property
    def shape(self):
        return self.prior.shape

    def gain(self, ab):
        c = self.prior.cov_spectrum
        return np.sqrt(ab) * c / (ab * c + (1.0 - ab))

    def apply(self, x_t, ab):
        mu = self.prior.mean
        return mu + ifft2(self.gain(ab) * fft2(x_t - np.sqrt(ab) * mu))

    def vjp(self, cotangent, ab):
        # F^H diag(real) F is symmetric
        return ifft2(self.gain(ab) * fft2(cotangent))


@dataclass(frozen=True)
class Affine:
    """Fixed map ``x -> W x + b`` on flattened images of shape ``shape``."""

    W: np.ndarray
    b: np.ndarray
    shape: tuple

    def apply(self, x_t, ab):
        lead = x_t.shape[:-3]
        flat = x_t.reshape(*lead, self.W.shape[1])
        return (flat @ self.W.T + self.b).reshape(*lead, *self.shape)

    def vjp(self, cotangent, ab):
        lead = cotangent.shape[:-3]
        flat = cotangent.reshape(*lead, self.W.shape[0])
        return (flat @ self.W).reshape(*lead, *self.shape)


@dataclass(frozen=True)
class DenoiserSpec:
    base: Union[GaussianAnalytic, Affine]
    schedule: NoiseSchedule
    adapter: Optional[LowRankAdapter] = None

    def with_adapter(self, adapter) -> "DenoiserSpec":
        return replace(self, adapter=adapter)


def denoise(spec: DenoiserSpec, x_t, t):
    if t < 1:
        raise UdmError("the denoiser is undefined at t = 0", code="bad_step")
    ab, _ = spec.schedule.query(t)
    out = spec.base.apply(np.asarray(x_t, dtype=np.float64), ab)
    if spec.adapter is not None:
        out = out + spec.adapter.apply(x_t, t)
    return out


def initialize_first_module(y, x_t, t, model: MeasurementModel, schedule: NoiseSchedule, weights=(0.5, 0.5)):
    """``w_y A^+ y + w_x x_t / sqrt(ab_t)``.

    The weights are validated as a convex pair; the training code calls
    :func:`initializer_terms` directly so it can differentiate them freely.
    """
    w_y, w_x = weights
    if w_y < 0 or w_x < 0 or abs(w_y + w_x - 1.0) > 1e-12:
        raise UdmError(f"initializer weights must be convex, got {weights}", code="bad_weights")
    pinv_y, scaled_xt = initializer_terms(y, x_t, t, model, schedule, need_pinv=w_y > 0)
    return w_y * pinv_y + w_x * scaled_xt


def initializer_terms(y, x_t, t, model, schedule, need_pinv=True):
    ab, _ = schedule.query(t)
    scaled_xt = np.asarray(x_t, dtype=np.float64) / np.sqrt(ab)
    if need_pinv:
        pinv_y = pseudo_inverse_apply(model, y)
    else:
        pinv_y = np.zeros(scaled_xt.shape[-3:])
    return pinv_y, scaled_xt
