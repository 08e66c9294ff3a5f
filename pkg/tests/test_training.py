import math

import numpy as np
import pytest
import scipy.linalg

from udm.checks import finite_difference_error, random_linear_model
from udm.denoiser import Affine, DenoiserSpec, GaussianAnalytic, GaussianPrior, LowRankAdapter, image_prior
from udm.errors import TrainingDiverged, UdmError
from udm.numerics import RngStream
from udm.operators import Blur, MeasurementModel, identity_kernel
from udm.sampler import UnfoldedSamplerConfig
from udm.tensor_io import load_checkpoint
from udm.toys import gaussian_toy, toy_config
from udm.training import (
    TrainingItem,
    TrainState,
    draw_batch,
    grad_l2,
    l2_loss,
    train_adapter,
    trained_config,
)
from udm.verification import operator_matrix


@pytest.fixture(scope="module")
def toy():
    return gaussian_toy()


def small_problem(i, K=2, r=2, dims=(4, 4), kind="deblur"):
    from udm.schedule import build_linear_schedule

    st = RngStream(500, i)
    prior = image_prior((1, *dims))
    model = random_linear_model(kind, dims, st, 0.1)
    cfg = UnfoldedSamplerConfig(DenoiserSpec(GaussianAnalytic(prior.scaled(0.5)), build_linear_schedule()), K=K)
    d = dims[0] * dims[1]
    state = TrainState(LowRankAdapter(0.3 * st.gaussian((d, r)), 0.3 * st.gaussian((d, r)), 1.0), (0.4, 0.6))
    return state, draw_batch(prior, model, cfg, 2, 7, i), model, cfg


@pytest.mark.parametrize("kind", ["deblur", "inpaint", "sr2"])
def test_gradient_matches_finite_differences(kind):
    for i in range(3):
        state, batch, model, cfg = small_problem(i, K=3 if kind == "sr2" else 2, kind=kind)
        _, g = grad_l2(state, batch, model, cfg)
        assert finite_difference_error(state, batch, model, cfg, g, l2_loss) <= 1e-5


def test_gradient_loss_value_matches_l2(toy):
    state, batch, model, cfg = small_problem(0)
    loss, _ = grad_l2(state, batch, model, cfg)
    assert loss == pytest.approx(l2_loss(state, batch, model, cfg), rel=1e-14)


def test_gate_gradient_vanishes_at_zero_adapter():
    state, batch, model, cfg = small_problem(1)
    state = TrainState(LowRankAdapter(np.zeros((16, 2)), np.zeros((16, 2)), 1.0), (0.5, 0.5))
    _, g = grad_l2(state, batch, model, cfg)
    assert g["gate"] == 0.0
    assert not g["U"].any() and not g["V"].any()


def test_weight_derivative_along_simplex():
    state, batch, model, cfg = small_problem(2)
    _, g = grad_l2(state, batch, model, cfg)
    h = 1e-6
    w_y, w_x = state.init_weights

    def loss_at(wy):
        return l2_loss(TrainState(state.adapter, (wy, 1.0 - wy)), batch, model, cfg)

    fd = (loss_at(w_y + h) - loss_at(w_y - h)) / (2 * h)
    along = g["w_y"] - g["w_x"]
    assert along == pytest.approx(fd, rel=1e-6)
    projected = np.array([g["w_y"], g["w_x"]]) - 0.5 * (g["w_y"] + g["w_x"])
    assert abs(projected.sum()) <= 1e-10


def test_affine_base_gradients():
    state, batch, model, cfg = small_problem(3)
    st = RngStream(3, 3)
    base = Affine(0.2 * st.gaussian((16, 16)), st.gaussian(16), (1, 4, 4))
    from dataclasses import replace

    cfg = replace(cfg, denoiser=DenoiserSpec(base, cfg.schedule))
    _, g = grad_l2(state, batch, model, cfg)
    assert finite_difference_error(state, batch, model, cfg, g, l2_loss) <= 1e-5


def test_nonlinear_model_rejected(toy):
    from udm.operators import Jpeg

    cfg = toy_config(toy, 0.005)
    state = TrainState(LowRankAdapter(np.zeros((64, 1)), np.zeros((64, 1))))
    with pytest.raises(UdmError) as e:
        grad_l2(state, [], MeasurementModel(Jpeg(10), 0.05), cfg)
    assert e.value.code == "grad_unsupported"


def test_perfect_reconstruction_gives_zero_loss(schedule):
    # zero-mean prior; the adapter cancels the denoiser's shrinkage so every
    # module hands back its input, and the prox returns x0 itself
    prior = GaussianPrior(np.zeros((1, 4, 4)), image_prior((1, 4, 4)).cov_spectrum)
    model = MeasurementModel(Blur(identity_kernel()), 1e-3)
    cfg = UnfoldedSamplerConfig(DenoiserSpec(GaussianAnalytic(prior), schedule), K=2, delta=1e12, t_delta=10)
    a = schedule.alpha_bar[10]
    C = prior.dense_covariance()
    G = np.sqrt(a) * C @ np.linalg.inv(a * C + (1 - a) * np.eye(16))
    correction = np.eye(16) / np.sqrt(a) - G
    U, s, Vt = np.linalg.svd(correction)
    adapter = LowRankAdapter(U * s, Vt.T, 1.0)
    x0 = prior.sample(RngStream(0, 1))
    ab_t = schedule.alpha_bar[40]
    item = TrainingItem(x0, 40, np.sqrt(ab_t) * x0, x0.copy(), np.zeros((2, 1, 4, 4)))
    assert l2_loss(TrainState(adapter, (0.5, 0.5)), [item], model, cfg) <= 1e-18


def test_loss_ignores_batch_order(toy):
    cfg = toy_config(toy, 0.005, init_weights=(0.5, 0.5))
    batch = draw_batch(toy.prior, toy.model, cfg, 5, 0, 0)
    state = TrainState(LowRankAdapter(np.zeros((64, 2)), np.ones((64, 2))))
    a = l2_loss(state, batch, toy.model, cfg)
    assert l2_loss(state, batch[::-1], toy.model, cfg) == pytest.approx(a, rel=1e-14)


def test_loss_errors(toy):
    cfg = toy_config(toy, 0.005)
    state = TrainState(LowRankAdapter(np.zeros((64, 1)), np.zeros((64, 1))))
    with pytest.raises(UdmError) as e:
        l2_loss(state, [], toy.model, cfg)
    assert e.value.code == "empty_batch"
    batch = draw_batch(toy.prior, toy.model, cfg, 3, 0, 0)
    bad = TrainingItem(np.full((1, 8, 8), np.nan), *(getattr(batch[1], f) for f in ("t", "x_t", "y", "module_noise")))
    with pytest.raises(UdmError) as e:
        l2_loss(state, [batch[0], bad, batch[2]], toy.model, cfg)
    assert e.value.code == "loss_nan" and e.value.details["item"] == 1


def test_batches_replay(toy):
    cfg = toy_config(toy, 0.005)
    a = draw_batch(toy.prior, toy.model, cfg, 3, 4, 2)
    b = draw_batch(toy.prior, toy.model, cfg, 3, 4, 2)
    c = draw_batch(toy.prior, toy.model, cfg, 3, 4, 3)
    assert all(np.array_equal(p.x_t, q.x_t) and np.array_equal(p.module_noise, q.module_noise) for p, q in zip(a, b))
    assert not np.array_equal(a[0].x0, c[0].x0)
    assert all(1 <= it.t <= 1000 for it in draw_batch(toy.prior, toy.model, cfg, 50, 0, 0))


def test_zero_learning_rate_changes_nothing(toy):
    cfg = toy_config(toy, 0.005, init_weights=(0.5, 0.5))
    state = train_adapter(cfg, toy.model, toy.prior, 5, lr=0.0, seed=1, rank=2, fixed_batch=True)
    fresh = train_adapter(cfg, toy.model, toy.prior, 1, lr=0.0, seed=1, rank=2)
    assert np.array_equal(state.adapter.U, fresh.adapter.U) and np.array_equal(state.adapter.V, fresh.adapter.V)
    assert state.init_weights == (0.5, 0.5)
    assert len(set(state.loss_trace)) == 1


def test_training_replays_and_leaves_inputs_alone(toy, tmp_path):
    cfg = toy_config(toy, 0.005, init_weights=(0.5, 0.5), denoiser_prior=toy.prior.scaled(0.1))
    spectrum = cfg.denoiser.base.prior.cov_spectrum.copy()
    kernel = toy.model.operator.kernel.taps.copy()
    a = train_adapter(cfg, toy.model, toy.prior, 8, lr=3e-3, seed=2, rank=3, checkpoint_path=tmp_path / "a.udmt")
    b = train_adapter(cfg, toy.model, toy.prior, 8, lr=3e-3, seed=2, rank=3)
    assert a.loss_trace == b.loss_trace
    assert np.array_equal(a.adapter.U, b.adapter.U)
    assert cfg.denoiser.adapter is None
    assert np.array_equal(cfg.denoiser.base.prior.cov_spectrum, spectrum)
    assert np.array_equal(toy.model.operator.kernel.taps, kernel)
    back = load_checkpoint(tmp_path / "a.udmt")
    assert np.array_equal(back.adapter.U, a.adapter.U) and back.step == 8
    assert back.loss_trace == a.loss_trace and back.init_weights == a.init_weights
    resumed = train_adapter(cfg, toy.model, toy.prior, 2, lr=3e-3, seed=2, state=back)
    assert resumed.step == 10


def test_mismatched_prior_training_helps(toy):
    cfg = toy_config(toy, 0.005, init_weights=(0.5, 0.5), denoiser_prior=toy.prior.scaled(0.1))
    val = draw_batch(toy.prior, toy.model, cfg, 64, 999, 0)
    state = train_adapter(cfg, toy.model, toy.prior, 200, lr=3e-3, seed=0, validation=val)
    start, end = state.val_trace[0][1], state.val_trace[-1][1]
    assert end <= 0.8 * start
    assert l2_loss(state, val, toy.model, trained_config(cfg, state)) == pytest.approx(end)


def test_divergence_aborts(toy):
    cfg = toy_config(toy, 0.005, init_weights=(0.5, 0.5))
    with pytest.raises(TrainingDiverged) as e, np.errstate(all="ignore"):
        train_adapter(cfg, toy.model, toy.prior, 200, lr=50.0, seed=0, train_weights=False)
    assert e.value.code == "training_diverged"


# --------------------------------------------------------------------------
# expected loss of the untrained chain: dense Gaussian propagation
# --------------------------------------------------------------------------


def expected_chain_loss(prior, model, cfg, weights):
    """E||x0 - L||^2 averaged over t, with every map assembled densely.

    The chain is affine in the standard normal vector
    w = (prior whitening, forward noise, measurement noise, K module noises),
    so each quantity is kept as (matrix acting on w, constant).
    """
    d = prior.mean.size
    sch = cfg.schedule
    A = operator_matrix(model, prior.shape)
    m = A.shape[0]
    U_, s_, Vt_ = np.linalg.svd(A, full_matrices=False)
    floor = 1e-3 * s_.max()
    pinv = Vt_.T @ np.diag(1 / np.maximum(s_, floor)) @ U_.T
    C = prior.dense_covariance()
    L = scipy.linalg.cholesky(C + 1e-14 * np.eye(d), lower=True)
    mu = prior.mean.ravel()
    K = cfg.K
    n_w = 2 * d + m + K * d
    ab_d = sch.alpha_bar[cfg.t_delta]
    Cd = cfg.denoiser.base.prior.dense_covariance()
    mu_d = cfg.denoiser.base.prior.mean.ravel()
    G = np.sqrt(ab_d) * Cd @ np.linalg.inv(ab_d * Cd + (1 - ab_d) * np.eye(d))

    X0 = np.zeros((d, n_w))
    X0[:, :d] = L
    E = np.zeros((d, n_w))
    E[:, d : 2 * d] = np.eye(d)
    N = np.zeros((m, n_w))
    N[:, 2 * d : 2 * d + m] = np.eye(m)
    total = 0.0
    for t in range(1, sch.T + 1):
        ab, s2 = sch.alpha_bar[t], sch.sigma_t_sq[t]
        Y, y0 = A @ X0 + model.sigma * N, A @ mu
        XT, xt0 = np.sqrt(ab) * X0 + np.sqrt(1 - ab) * E, np.sqrt(ab) * mu
        M = weights[0] * pinv @ Y + weights[1] * XT / np.sqrt(ab)
        c = weights[0] * pinv @ y0 + weights[1] * xt0 / np.sqrt(ab)
        S = A.T @ A / model.sigma**2 + (1 / s2 + 1 / cfg.delta) * np.eye(d)
        Sinv = np.linalg.inv(S)
        for k in range(K):
            M = Sinv @ (A.T @ Y / model.sigma**2 + XT / (np.sqrt(ab) * s2) + M / cfg.delta)
            c = Sinv @ (A.T @ y0 / model.sigma**2 + xt0 / (np.sqrt(ab) * s2) + c / cfg.delta)
            Xi = np.zeros((d, n_w))
            Xi[:, 2 * d + m + k * d : 2 * d + m + (k + 1) * d] = np.eye(d)
            M = G @ (np.sqrt(ab_d) * M + np.sqrt(1 - ab_d) * Xi)
            c = mu_d + G @ (np.sqrt(ab_d) * c - np.sqrt(ab_d) * mu_d)
        R, r0 = X0 - M, mu - c
        total += r0 @ r0 + np.sum(R * R)
    return total / sch.T


def test_expected_loss_matches_dense_propagation(toy):
    cfg = toy_config(toy, 0.005)
    exact = expected_chain_loss(toy.prior, toy.model, cfg, cfg.init_weights)
    state = TrainState(LowRankAdapter(np.zeros((64, 1)), np.zeros((64, 1))), cfg.init_weights)
    items = draw_batch(toy.prior, toy.model, cfg, 10**4, 31, 0)
    per_item = np.array([l2_loss(state, [it], toy.model, cfg) for it in items])
    mc = per_item.mean()
    assert mc == pytest.approx(l2_loss(state, items, toy.model, cfg), rel=1e-12)
    assert mc == pytest.approx(exact, rel=0.02)
    assert abs(mc - exact) <= 3 * per_item.std() / math.sqrt(len(items))
