"""Brute-force oracles and metrics.

Nothing here is fast on purpose: operators are materialized as dense
matrices and Gaussians are conditioned by dense factorization, so these
routines stay independent of the structured solvers they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import UdmError
from .numerics import fft2
from .operators import MeasurementModel
from .prox import ProxContext

MAX_DENSE_DIM = 4096


@dataclass(frozen=True)
class DenseGaussian:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise UdmError("covariance is not symmetric", code="not_psd")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise UdmError("covariance has negative eigenvalues", code="not_psd")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class SpectralGaussian:
    """Gaussian with circulant covariance ``F^H diag(spectrum) F``."""

    mean: np.ndarray
    spectrum: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.spectrum) < -1e-12):
            raise UdmError("spectrum has negative entries", code="not_psd")


def operator_matrix(model: MeasurementModel, shape) -> np.ndarray:
    """Dense matrix of a linear operator acting on flattened ``shape`` images."""
    d = int(np.prod(shape))
    if d > MAX_DENSE_DIM:
        raise UdmError(f"dense oracle capped at d={MAX_DENSE_DIM}, got {d}", code="too_large")
    basis = np.eye(d).reshape(d, *shape)
    cols = model.operator.apply(basis)
    # a transposed view here pushes later matmuls off the fast BLAS path
    return np.ascontiguousarray(cols.reshape(d, -1).T)


def _as_vec(x):
    return np.asarray(x, dtype=np.float64).ravel()


def _conditioned(precision, information, shape) -> DenseGaussian:
    try:
        chol = scipy.linalg.cho_factor(precision)
    except np.linalg.LinAlgError as exc:
        raise UdmError("precision matrix is singular", code="singular") from exc
    mean = scipy.linalg.cho_solve(chol, information)
    cov = scipy.linalg.cho_solve(chol, np.eye(len(information)))
    cov = 0.5 * (cov + cov.T)
    return DenseGaussian(mean.reshape(shape), cov)


def _prior_terms(prior):
    cov = prior.dense_covariance()
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    return prec, prec @ _as_vec(prior.mean)


def dense_posterior(prior, model: MeasurementModel, y) -> DenseGaussian:
    if not model.is_linear:
        raise UdmError("dense posterior needs a linear model", code="nonlinear")
    A = operator_matrix(model, prior.shape)
    prior_prec, prior_info = _prior_terms(prior)
    precision = A.T @ A / model.sigma**2 + prior_prec
    information = A.T @ _as_vec(y) / model.sigma**2 + prior_info
    return _conditioned(precision, information, prior.shape)


def dense_conditional_posterior(prior, model: MeasurementModel, y, x_t, t, schedule) -> DenseGaussian:
    """Posterior of ``x0`` given both ``y`` and ``x_t = sqrt(ab) x0 + noise``."""
    if t < 1:
        raise UdmError("conditioning on x_t needs t >= 1", code="bad_step")
    ab, s2 = schedule.query(t)
    A = operator_matrix(model, prior.shape)
    prior_prec, prior_info = _prior_terms(prior)
    d = A.shape[1]
    precision = A.T @ A / model.sigma**2 + prior_prec + np.eye(d) / s2
    information = A.T @ _as_vec(y) / model.sigma**2 + prior_info + _as_vec(x_t) / (math.sqrt(ab) * s2)
    return _conditioned(precision, information, prior.shape)


def dense_denoiser_mean(prior, x_t, ab) -> np.ndarray:
    """``E[x0 | x_t]`` from the joint Gaussian of ``(x0, x_t)``."""
    C = prior.dense_covariance()
    mu = _as_vec(prior.mean)
    cross = math.sqrt(ab) * C
    marg = ab * C + (1.0 - ab) * np.eye(len(mu))
    shift = np.linalg.solve(marg, _as_vec(x_t) - math.sqrt(ab) * mu)
    return (mu + cross @ shift).reshape(prior.shape)


def dense_prox_solve(ctx: ProxContext, x) -> np.ndarray:
    """Assemble ``Sigma`` densely and solve the prox normal equations."""
    shape = np.shape(x)
    A = operator_matrix(ctx.model, shape)
    d = A.shape[1]
    sigma_mat = A.T @ A / ctx.model.sigma**2 + ctx.shift * np.eye(d)
    rhs = A.T @ _as_vec(ctx.y) / ctx.model.sigma**2 + _as_vec(x) / ctx.delta
    if ctx.x_t is not None:
        rhs = rhs + _as_vec(ctx.x_t) / (math.sqrt(ctx.alpha_bar) * ctx.sigma_t_sq)
    try:
        return scipy.linalg.solve(sigma_mat, rhs, assume_a="pos").reshape(shape)
    except np.linalg.LinAlgError as exc:
        raise UdmError("prox system is singular", code="singular") from exc


def psnr(a, b, peak=1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UdmError(f"shape mismatch {a.shape} vs {b.shape}", code="shape_mismatch")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _psd_sqrt(mat):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise UdmError("matrix is not positive semidefinite", code="not_psd")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def gaussian_w2(p, q) -> float:
    """2-Wasserstein distance between Gaussians.

    Two :class:`SpectralGaussian` arguments use the commuting closed form;
    anything else is converted to dense form and uses the Bures formula.
    """
    dmu = _as_vec(p.mean) - _as_vec(q.mean)
    if dmu.size != _as_vec(q.mean).size:
        raise UdmError("dimension mismatch", code="shape_mismatch")
    if isinstance(p, SpectralGaussian) and isinstance(q, SpectralGaussian):
        sp = np.broadcast_to(np.clip(p.spectrum, 0, None), p.mean.shape)
        sq = np.broadcast_to(np.clip(q.spectrum, 0, None), q.mean.shape)
        return math.sqrt(dmu @ dmu + np.sum((np.sqrt(sp) - np.sqrt(sq)) ** 2))
    cp, cq = _dense_cov(p), _dense_cov(q)
    root_p = _psd_sqrt(cp)
    cross = _psd_sqrt(root_p @ cq @ root_p)
    bures = np.trace(cp) + np.trace(cq) - 2.0 * np.trace(cross)
    return math.sqrt(max(dmu @ dmu + bures, 0.0))


def spectral_to_dense(g: SpectralGaussian) -> DenseGaussian:
    shape = g.mean.shape
    d = g.mean.size
    eye = np.eye(d).reshape(d, *shape)
    cov = np.fft.ifft2(np.broadcast_to(g.spectrum, shape) * fft2(eye), norm="ortho").real.reshape(d, d)
    return DenseGaussian(g.mean, 0.5 * (cov + cov.T))


def _dense_cov(g):
    if isinstance(g, SpectralGaussian):
        return spectral_to_dense(g).covariance
    return np.asarray(g.covariance, dtype=np.float64)


@dataclass(frozen=True)
class Moments:
    mean: np.ndarray
    variance: np.ndarray
    spectrum: np.ndarray

    def spectral(self) -> SpectralGaussian:
        return SpectralGaussian(self.mean, self.spectrum)


def empirical_moments(samples) -> Moments:
    """Unbiased mean, per-pixel variance and per-frequency power.

    The power spectrum estimates the eigenvalues of a circulant covariance:
    ``E|F(x - mu)|^2`` under the unitary DFT.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 2:
        raise UdmError("need at least two samples", code="too_few")
    n = x.shape[0]
    mean = x.mean(axis=0)
    centered = x - mean
    variance = (centered**2).sum(axis=0) / (n - 1)
    power = (np.abs(fft2(centered)) ** 2).sum(axis=0) / (n - 1)
    return Moments(mean, variance, power)


def relative_error(estimate, reference) -> float:
    return float(np.linalg.norm(_as_vec(estimate) - _as_vec(reference)) / np.linalg.norm(_as_vec(reference)))
