import numpy as np
import pytest

from udm.denoiser import Affine, DenoiserSpec, GaussianAnalytic, denoise, image_prior
from udm.errors import SamplerNaN, UdmError
from udm.numerics import RngStream
from udm.operators import Blur, MeasurementModel, identity_kernel, measure
from udm.prox import ProxContext
from udm.sampler import (
    NfeCounter,
    UnfoldedSamplerConfig,
    conditional_diffusion_sample,
    ddim_reverse_step,
    latino_module,
    unfolded_sample_x0,
    zero_shot_latino,
)
from udm.schedule import make_time_grid, noise_to, schedule_from_betas
from udm.toys import gaussian_toy, toy_config
from udm.verification import dense_conditional_posterior, dense_denoiser_mean, dense_posterior, relative_error


@pytest.fixture(scope="module")
def toy():
    return gaussian_toy()


def test_config_resolves_matched_defaults(schedule):
    cfg = UnfoldedSamplerConfig(DenoiserSpec(GaussianAnalytic(image_prior((1, 4, 4))), schedule))
    assert cfg.delta == schedule.sigma_t_sq[cfg.t_delta]
    with pytest.raises(UdmError):
        UnfoldedSamplerConfig(cfg.denoiser, K=0)
    with pytest.raises(UdmError):
        UnfoldedSamplerConfig(cfg.denoiser, t_delta=1001)


def test_tiny_delta_module_is_renoise_denoise(toy):
    cfg = toy_config(toy, 1e-10)
    x = toy.prior.sample(RngStream(1, 1))
    x_t = noise_to(x, 50, RngStream(1, 2).gaussian(x.shape), toy.schedule)
    ctx = ProxContext(1e-10, 50, toy.model, toy.y, x_t, toy.schedule)
    eps = RngStream(1, 3).gaussian(x.shape)
    out = latino_module(x, ctx, cfg, None, eps=eps)
    ref = denoise(cfg.denoiser, noise_to(x, cfg.t_delta, eps, toy.schedule), cfg.t_delta)
    assert relative_error(out, ref) <= 1e-6


def test_module_fixed_point_near_noiseless_renoising(stream):
    # alpha_bar at t_delta is 1 - 1e-12, so renoise + denoise is the identity up to
    # 1e-12 and the module iterates the prox to the flat-prior conditional mean
    sch = schedule_from_betas([1e-12, 0.5])
    prior = image_prior((1, 4, 4))
    model = MeasurementModel(Blur(identity_kernel()), 1.0)
    y, x_t = stream.gaussian((1, 4, 4)), stream.gaussian((1, 4, 4))
    cfg = UnfoldedSamplerConfig(DenoiserSpec(GaussianAnalytic(prior), sch), K=1, delta=1.0, t_delta=1)
    ctx = ProxContext(1.0, 2, model, y, x_t, sch)
    x = np.zeros((1, 4, 4))
    for _ in range(100):
        x = latino_module(x, ctx, cfg, stream, eps=np.zeros_like(x))
    flat = dense_conditional_posterior(prior.scaled(1e12), model, y, x_t, 2, sch)
    assert relative_error(x, flat.mean) <= 1e-4
    assert relative_error(x, (y + np.sqrt(2) * x_t) / 2) <= 1e-4


def test_module_counters(toy):
    cfg = toy_config(toy, 0.005)
    ctx = ProxContext(0.005, 30, toy.model, toy.y, toy.y, toy.schedule)
    c = NfeCounter()
    latino_module(toy.y, ctx, cfg, RngStream(0, 0), c)
    assert (c.prox_evals, c.denoiser_evals, c.initializer_evals) == (1, 1, 0)


def test_unfolded_counts_and_replay(toy):
    cfg = toy_config(toy, 0.005, K=3)
    x_t = noise_to(toy.x_true, 100, RngStream(0, 5).gaussian((1, 8, 8)), toy.schedule)
    c = NfeCounter()
    a = unfolded_sample_x0(x_t, toy.y, toy.model, 100, cfg, RngStream(4, 0), c)
    assert (c.denoiser_evals, c.initializer_evals, c.total) == (3, 1, 4)
    b = unfolded_sample_x0(x_t, toy.y, toy.model, 100, cfg, RngStream(4, 0))
    assert np.array_equal(a, b)
    with pytest.raises(UdmError):
        unfolded_sample_x0(x_t, toy.y, toy.model, 0, cfg, RngStream(4, 0))


def test_shared_noise_option(toy):
    cfg = toy_config(toy, 0.005)
    from dataclasses import replace

    shared = replace(cfg, fresh_noise_per_module=False)
    x_t = noise_to(toy.x_true, 100, RngStream(0, 5).gaussian((1, 8, 8)), toy.schedule)
    a = unfolded_sample_x0(x_t, toy.y, toy.model, 100, cfg, RngStream(4, 0))
    b = unfolded_sample_x0(x_t, toy.y, toy.model, 100, shared, RngStream(4, 0))
    assert not np.array_equal(a, b)


def test_uninformative_measurement_recovers_xt_posterior(toy):
    model = MeasurementModel(toy.model.operator, 1e3)
    y = model.operator.apply(toy.prior.mean)
    cfg = toy_config(toy, 0.005, K=3, init_weights=(0.0, 1.0))
    t = 20
    x_t = noise_to(toy.x_true, t, RngStream(3, 3).gaussian((1, 8, 8)), toy.schedule)
    draws = np.stack([unfolded_sample_x0(x_t, y, model, t, cfg, RngStream(5, c)) for c in range(2000)])
    ref = dense_denoiser_mean(toy.prior, x_t, toy.schedule.query(t)[0])
    assert relative_error(draws.mean(axis=0), ref) <= 0.05


def test_ddim_examples(schedule, stream):
    x0 = stream.gaussian((1, 4, 4))
    x_t = stream.gaussian((1, 4, 4))
    assert np.array_equal(ddim_reverse_step(x0, x_t, 400, 0, schedule), x0)
    ab_n, ab_p = schedule.alpha_bar[400], schedule.alpha_bar[150]
    out = ddim_reverse_step(x0, np.sqrt(ab_n) * x0, 400, 150, schedule)
    assert np.allclose(out, np.sqrt(ab_p) * x0, atol=1e-14)
    for bad in ((0, 0), (100, 100)):
        with pytest.raises(UdmError):
            ddim_reverse_step(x0, x_t, *bad, schedule)


def test_ddim_preserves_marginals(schedule):
    st = RngStream(6, 0)
    x0 = np.full((10**4, 1, 2, 2), 0.3)
    x_t = noise_to(x0, 700, st.gaussian(x0.shape), schedule)
    out = ddim_reverse_step(x0, x_t, 700, 200, schedule)
    ab = schedule.alpha_bar[200]
    assert out.mean() == pytest.approx(np.sqrt(ab) * 0.3, rel=0.02)
    assert out.var() == pytest.approx(1 - ab, rel=0.02)


def test_stochastic_ddim_preserves_marginals(schedule):
    st = RngStream(6, 1)
    x0 = np.zeros((10**4, 1, 2, 2))
    x_t = noise_to(x0, 700, st.gaussian(x0.shape), schedule)
    out = ddim_reverse_step(x0, x_t, 700, 200, schedule, eta=1.0, stream=st)
    assert out.var() == pytest.approx(1 - schedule.alpha_bar[200], rel=0.02)


def test_outer_loop_counts(toy):
    cfg = toy_config(toy, 0.005, K=3)
    for N, expected in ((1, (3, 1)), (3, (9, 3)), (4, (12, 4))):
        _, c = conditional_diffusion_sample(toy.y, toy.model, make_time_grid(toy.schedule, N), cfg, 0)
        assert (c.denoiser_evals, c.initializer_evals) == expected
    _, c = conditional_diffusion_sample(toy.y, toy.model, make_time_grid(toy.schedule, 3), cfg, 0)
    assert c.total == 12


def test_single_outer_step_is_one_unfolded_call(toy):
    cfg = toy_config(toy, 0.005)
    out, _ = conditional_diffusion_sample(toy.y, toy.model, [0, 1000], cfg, 9)
    st = RngStream(9, 0)
    x_T = st.gaussian((1, 8, 8))
    assert np.array_equal(out, unfolded_sample_x0(x_T, toy.y, toy.model, 1000, cfg, st))


def test_bad_grid_rejected(toy):
    cfg = toy_config(toy, 0.005)
    for grid in ([0, 500], [1, 1000], [0, 600, 500, 1000]):
        with pytest.raises(UdmError) as e:
            conditional_diffusion_sample(toy.y, toy.model, grid, cfg, 0)
        assert e.value.code == "bad_grid"


def test_chains_are_independent_of_order(toy):
    cfg = toy_config(toy, 0.005)
    grid = make_time_grid(toy.schedule, 3)
    later = conditional_diffusion_sample(toy.y, toy.model, grid, cfg, 2, chain=5)[0]
    conditional_diffusion_sample(toy.y, toy.model, grid, cfg, 2, chain=4)
    again = conditional_diffusion_sample(toy.y, toy.model, grid, cfg, 2, chain=5)[0]
    other = conditional_diffusion_sample(toy.y, toy.model, grid, cfg, 2, chain=6)[0]
    assert np.array_equal(later, again) and not np.array_equal(later, other)


def test_non_finite_state_reports_position(toy):
    base = Affine(np.eye(64), np.full(64, np.inf), (1, 8, 8))
    cfg = UnfoldedSamplerConfig(DenoiserSpec(base, toy.schedule), K=2, delta=0.005, t_delta=18)
    with pytest.raises(SamplerNaN) as e:
        conditional_diffusion_sample(toy.y, toy.model, [0, 500, 1000], cfg, 0)
    assert e.value.code == "sampler_nan"
    assert (e.value.details["n"], e.value.details["k"]) == (2, 1)


def test_zero_shot_long_run_mean(toy):
    model = MeasurementModel(Blur(identity_kernel()), 0.1)
    y = measure(model, toy.x_true, RngStream(1, 9))
    post = dense_posterior(toy.prior, model, y)
    iterates = []
    zero_shot_latino(y, model, 500, toy_config(toy, 0.001), RngStream(2, 0), callback=lambda k, x: iterates.append(x) if k > 50 else None)
    assert relative_error(np.mean(iterates, axis=0), post.mean) <= 0.05


def test_zero_shot_single_iteration_definition(toy):
    cfg = toy_config(toy, 0.005)
    out = zero_shot_latino(toy.y, toy.model, 1, cfg, RngStream(3, 0))
    ctx = ProxContext(cfg.delta, cfg.t_delta, toy.model, toy.y, None, toy.schedule)
    x0 = toy.model.operator.pinv(toy.y)
    assert np.array_equal(out, latino_module(x0, ctx, cfg, RngStream(3, 0)))
    assert np.array_equal(out, zero_shot_latino(toy.y, toy.model, 1, cfg, RngStream(3, 0)))
    with pytest.raises(UdmError):
        zero_shot_latino(toy.y, toy.model, 0, cfg, RngStream(3, 0))
