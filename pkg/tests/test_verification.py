import math

import numpy as np
import pytest

from udm.checks import random_prox_instance
from udm.denoiser import GaussianPrior, image_prior
from udm.errors import UdmError
from udm.numerics import RngStream
from udm.operators import Blur, Masking, MeasurementModel, build_gaussian_kernel, identity_kernel, Mask
from udm.prox import prox_cg
from udm.schedule import schedule_from_betas
from udm.verification import (
    DenseGaussian,
    SpectralGaussian,
    dense_conditional_posterior,
    dense_denoiser_mean,
    dense_posterior,
    dense_prox_solve,
    empirical_moments,
    gaussian_w2,
    operator_matrix,
    psnr,
    relative_error,
    spectral_to_dense,
)

HALF = schedule_from_betas([0.5])


def white(shape=(1, 4, 4)):
    return GaussianPrior(np.zeros(shape), np.ones(shape[-2:]))


def test_conjugate_update(stream):
    y = stream.gaussian((1, 4, 4))
    post = dense_posterior(white(), MeasurementModel(Blur(identity_kernel()), 1.0), y)
    assert np.allclose(post.mean, y / 2, atol=1e-14)
    assert np.allclose(post.covariance, np.eye(16) / 2, atol=1e-14)


def test_no_data_returns_prior(stream):
    prior = image_prior((1, 4, 4))
    model = MeasurementModel(Masking(Mask(np.zeros((4, 4)))), 0.1)
    post = dense_posterior(prior, model, stream.gaussian((1, 4, 4)))
    assert np.allclose(post.mean, prior.mean, atol=1e-12)
    assert np.allclose(post.covariance, prior.dense_covariance(), atol=1e-12)


def test_three_precision_sum(stream):
    y, x_t = stream.gaussian((1, 4, 4)), stream.gaussian((1, 4, 4))
    post = dense_conditional_posterior(white(), MeasurementModel(Blur(identity_kernel()), 1.0), y, x_t, 1, HALF)
    assert np.allclose(post.mean, (y + np.sqrt(2) * x_t) / 3, atol=1e-14)
    assert np.allclose(post.covariance, np.eye(16) / 3, atol=1e-14)


def test_vanishing_data_reduces_to_denoiser(stream, schedule):
    prior = image_prior((1, 4, 4))
    x_t = stream.gaussian((1, 4, 4))
    post = dense_conditional_posterior(prior, MeasurementModel(Blur(identity_kernel()), 1e6), stream.gaussian((1, 4, 4)), x_t, 300, schedule)
    ref = dense_denoiser_mean(prior, x_t, schedule.alpha_bar[300])
    assert relative_error(post.mean, ref) <= 1e-9


def test_posterior_monte_carlo_d2():
    # two pixels, by rejection-free importance weighting of prior draws
    prior = GaussianPrior(np.array([[[0.2, -0.1]]]), np.array([[1.0, 0.3]]))
    model = MeasurementModel(Blur(identity_kernel()), 0.5)
    y = np.array([[[0.7, 0.4]]])
    post = dense_posterior(prior, model, y)
    x = prior.sample(RngStream(4, 0), 200000).reshape(-1, 2)
    logw = -0.5 * np.sum((x - y.reshape(2)) ** 2, axis=1) / 0.25
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = w @ x
    cov = (x - mean).T @ ((x - mean) * w[:, None])
    assert np.allclose(mean, post.mean.ravel(), atol=0.01)
    assert np.allclose(cov, post.covariance, atol=0.01)


def test_dense_prox_matches_cg():
    for kind in ("deblur", "inpaint", "sr2"):
        ctx, x = random_prox_instance(kind, RngStream(12, 0))
        assert relative_error(dense_prox_solve(ctx, x), prox_cg(ctx, x)) <= 1e-9


def test_dense_cap():
    with pytest.raises(UdmError) as e:
        operator_matrix(MeasurementModel(Blur(identity_kernel())), (1, 65, 64))
    assert e.value.code == "too_large"


def test_operator_matrix_columns(stream):
    m = MeasurementModel(Blur(build_gaussian_kernel(3, 0.7)))
    A = operator_matrix(m, (1, 4, 4))
    x = stream.gaussian((1, 4, 4))
    assert np.allclose(A @ x.ravel(), m.operator.apply(x).ravel())


def test_psnr_examples():
    a = np.zeros((1, 4, 4))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.1, peak=255.0) == pytest.approx(20.0 + 20 * math.log10(255))
    with pytest.raises(UdmError):
        psnr(a, np.zeros((1, 4, 5)))


def test_w2_examples(stream):
    cov = np.diag([1.0, 2.0])
    p = DenseGaussian(np.zeros(2), cov)
    assert gaussian_w2(p, p) == pytest.approx(0.0, abs=1e-7)
    q = DenseGaussian(np.array([2.0, 0.0]), cov)
    assert gaussian_w2(p, q) == pytest.approx(2.0)
    # scalar case: |sqrt(a) - sqrt(b)|
    assert gaussian_w2(DenseGaussian(np.zeros(1), [[4.0]]), DenseGaussian(np.zeros(1), [[1.0]])) == pytest.approx(1.0)


def test_w2_spectral_equals_bures(stream):
    for i in range(5):
        st = RngStream(30, i)
        a = image_prior((1, 4, 4), pixel_std=0.1 + st.uniform(1)[0]).cov_spectrum
        b = image_prior((1, 4, 4), corr_length=0.5 + 2 * st.uniform(1)[0]).cov_spectrum
        p = SpectralGaussian(st.gaussian((1, 4, 4)), a)
        q = SpectralGaussian(st.gaussian((1, 4, 4)), b)
        assert gaussian_w2(p, q) == pytest.approx(gaussian_w2(spectral_to_dense(p), spectral_to_dense(q)), abs=1e-10)


def test_not_psd_rejected():
    with pytest.raises(UdmError):
        DenseGaussian(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(UdmError):
        DenseGaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_empirical_moments():
    same = np.ones((5, 1, 4, 4))
    m = empirical_moments(same)
    assert not m.variance.any() and not m.spectrum.any()
    x = RngStream(1, 1).gaussian((10**4, 1, 4, 4))
    m = empirical_moments(x)
    assert np.abs(m.mean).max() <= 0.05
    assert np.allclose(m.variance, 1.0, rtol=0.05)
    assert np.allclose(m.spectrum, 1.0, rtol=0.05)
    with pytest.raises(UdmError):
        empirical_moments(x[:1])


def test_relative_error():
    assert relative_error([1.0, 1.0], [1.0, 2.0]) == pytest.approx(1 / math.sqrt(5))
