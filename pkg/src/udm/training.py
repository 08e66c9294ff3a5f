"""End-to-end training of the tied low-rank adapter through the unfolded chain.

Every random draw inside the chain is frozen per training item, so the loss
is a deterministic function of the parameters. For affine base denoisers
and linear measurement models the whole chain is then affine in its inputs,
and the gradient below is the exact reverse-mode derivative: each prox
solve is adjoined by ``Sigma^{-1} / delta`` (``Sigma`` is symmetric) and the
denoiser by its transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Affine, GaussianAnalytic, GaussianPrior, LowRankAdapter, init_adapter, initializer_terms
from .errors import TrainingDiverged, UdmError
from .numerics import RngStream
from .operators import MeasurementModel, measure
from .prox import ProxContext, solve_sigma
from .sampler import UnfoldedSamplerConfig
from .schedule import noise_to


@dataclass(frozen=True)
class TrainingItem:
    x0: np.ndarray
    t: int
    x_t: np.ndarray
    y: np.ndarray
    module_noise: np.ndarray  # (K, *x0.shape)


def draw_item(
    prior: GaussianPrior, model: MeasurementModel, config: UnfoldedSamplerConfig, stream: RngStream
) -> TrainingItem:
    schedule = config.schedule
    x0 = prior.sample(stream)
    t = 1 + min(int(stream.uniform(1)[0] * schedule.T), schedule.T - 1)
    x_t = noise_to(x0, t, stream.gaussian(x0.shape), schedule)
    y = measure(model, x0, stream)
    noise = stream.gaussian((config.K, *x0.shape))
    return TrainingItem(x0, t, x_t, y, noise)


def draw_batch(prior, model, config, size, seed, epoch):
    """Items for one step; item ``i`` of ``epoch`` always gets the same draws."""
    root = RngStream(seed, epoch)
    return [draw_item(prior, model, config, root.child(i)) for i in range(size)]


@dataclass
class TrainState:
    adapter: LowRankAdapter
    init_weights: tuple = (0.5, 0.5)
    moments: dict = field(default_factory=dict)
    step: int = 0
    loss_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)


def _check_supported(config: UnfoldedSamplerConfig, model: MeasurementModel):
    if not isinstance(config.denoiser.base, (GaussianAnalytic, Affine)):
        raise UdmError("gradients need an affine base denoiser", code="grad_unsupported")
    if not model.is_linear:
        raise UdmError("gradients need a linear measurement model", code="grad_unsupported")


def _forward(state: TrainState, item: TrainingItem, model, config):
    """Run the chain on one item, keeping what the backward pass needs."""
    schedule = config.schedule
    ab_d, _ = schedule.query(config.t_delta)
    adapter = state.adapter
    w_y, w_x = state.init_weights
    pinv_y, scaled_xt = initializer_terms(item.y, item.x_t, item.t, model, schedule, need_pinv=True)
    x = w_y * pinv_y + w_x * scaled_xt
    ctx = ProxContext(config.delta, item.t, model, item.y, item.x_t, schedule)
    inputs = []
    for k in range(config.K):
        z = solve_sigma(ctx, ctx.information(x))
        u = math.sqrt(ab_d) * z + math.sqrt(1.0 - ab_d) * item.module_noise[k]
        inputs.append(u)
        x = config.denoiser.base.apply(u, ab_d) + adapter.apply(u, config.t_delta)
    return x, (ctx, pinv_y, scaled_xt, inputs)


def chain_output(state, item, model, config):
    return _forward(state, item, model, config)[0]


def l2_loss(state: TrainState, batch, model, config) -> float:
    """Mean over items of ``||x0 - L(x_t, y)||^2``."""
    if not batch:
        raise UdmError("empty batch", code="empty_batch")
    total = 0.0
    for i, item in enumerate(batch):
        err = float(np.sum((item.x0 - chain_output(state, item, model, config)) ** 2))
        if not math.isfinite(err):
            raise UdmError(f"non-finite loss at item {i}", code="loss_nan", item=i)
        total += err
    return total / len(batch)


def grad_l2(state: TrainState, batch, model, config):
    """Exact gradient of :func:`l2_loss` w.r.t. ``U, V, gate, w_y, w_x``.

    ``w_y`` and ``w_x`` are differentiated as independent coordinates; the
    derivative along the convex constraint is ``g["w_y"] - g["w_x"]``.
    Returns ``(loss, grads)``.
    """
    _check_supported(config, model)
    if not batch:
        raise UdmError("empty batch", code="empty_batch")
    adapter = state.adapter
    ab_d, _ = config.schedule.query(config.t_delta)
    gate = adapter.gate_at(config.t_delta)
    base = config.denoiser.base
    grads = {"U": np.zeros_like(adapter.U), "V": np.zeros_like(adapter.V), "gate": 0.0, "w_y": 0.0, "w_x": 0.0}
    loss = 0.0
    scale = 1.0 / len(batch)
    for item in batch:  # fixed order keeps the reduction bit-reproducible
        out, (ctx, pinv_y, scaled_xt, inputs) = _forward(state, item, model, config)
        resid = out - item.x0
        loss += float(np.sum(resid**2))
        cot = 2.0 * scale * resid
        for u in reversed(inputs):
            u_flat = u.reshape(-1)
            c_flat = cot.reshape(-1)
            vu = adapter.V.T @ u_flat
            uc = adapter.U.T @ c_flat
            grads["U"] += gate * np.outer(c_flat, vu)
            grads["V"] += gate * np.outer(u_flat, uc)
            grads["gate"] += float(c_flat @ (adapter.U @ vu))
            cot_u = base.vjp(cot, ab_d) + gate * (adapter.V @ uc).reshape(u.shape)
            cot = solve_sigma(ctx, math.sqrt(ab_d) * cot_u) / ctx.delta
        grads["w_y"] += float(np.sum(cot * pinv_y))
        grads["w_x"] += float(np.sum(cot * scaled_xt))
    return loss * scale, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def _adamw(param, grad, moments, key, lr, step, weight_decay, b1=0.9, b2=0.999, eps=1e-8):
    m, v = moments.get(key, (np.zeros_like(grad), np.zeros_like(grad)))
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    moments[key] = (m, v)
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return param - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


def train_adapter(
    config: UnfoldedSamplerConfig,
    model: MeasurementModel,
    data_prior: GaussianPrior,
    steps: int,
    lr: float = 1e-4,
    seed: int = 0,
    rank: int = 5,
    batch_size: int = 4,
    weight_decay: float = 0.01,
    train_weights: bool = True,
    validation=None,
    validate_every: int = 0,
    checkpoint_path=None,
    state: TrainState | None = None,
    fixed_batch: bool = False,
) -> TrainState:
    """AdamW on :func:`grad_l2` over freshly drawn batches.

    ``validation`` is an optional fixed list of items; its loss is recorded
    at the start, every ``validate_every`` steps (0 means only at the end)
    and after the last step. ``fixed_batch`` reuses the first step's items
    at every step instead of drawing new ones.
    """
    if steps < 1:
        raise UdmError("steps must be at least 1", code="bad_config")
    _check_supported(config, model)
    if state is None:
        adapter = config.denoiser.adapter
        if adapter is None:
            adapter = init_adapter(int(np.prod(data_prior.shape)), rank, RngStream(seed, 2**63))
        state = TrainState(adapter.copy(), tuple(config.init_weights))
    cfg = _with_adapter(config, state.adapter)

    def validate():
        if validation is not None:
            state.val_trace.append((state.step, l2_loss(state, validation, model, cfg)))

    validate()
    first_loss = None
    bad_steps = 0
    for _ in range(steps):
        state.step += 1
        batch = draw_batch(data_prior, model, cfg, batch_size, seed, 1 if fixed_batch else state.step)
        loss, g = grad_l2(state, batch, model, cfg)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {state.step}")
        state.loss_trace.append(loss)
        first_loss = loss if first_loss is None else first_loss
        bad_steps = bad_steps + 1 if loss > 10.0 * first_loss else 0
        if bad_steps >= 20:
            raise TrainingDiverged(f"loss above 10x its initial value for 20 steps (step {state.step})")

        a = state.adapter
        a.U = _adamw(a.U, g["U"], state.moments, "U", lr, state.step, weight_decay)
        a.V = _adamw(a.V, g["V"], state.moments, "V", lr, state.step, weight_decay)
        if train_weights:
            w_y = float(_adamw(np.float64(state.init_weights[0]), g["w_y"] - g["w_x"], state.moments, "w_y", lr, state.step, 0.0))
            w_y = min(max(w_y, 0.0), 1.0)
            state.init_weights = (w_y, 1.0 - w_y)
        if validate_every and state.step % validate_every == 0:
            validate()
    if not validate_every or state.step % validate_every:
        validate()
    if checkpoint_path is not None:
        from .tensor_io import save_checkpoint

        save_checkpoint(checkpoint_path, state)
    return state


def _with_adapter(config: UnfoldedSamplerConfig, adapter: LowRankAdapter) -> UnfoldedSamplerConfig:
    from dataclasses import replace

    return replace(config, denoiser=config.denoiser.with_adapter(adapter))


def trained_config(config: UnfoldedSamplerConfig, state: TrainState) -> UnfoldedSamplerConfig:
    """Sampler config that uses the trained adapter and initializer weights."""
    from dataclasses import replace

    return replace(config, denoiser=config.denoiser.with_adapter(state.adapter), init_weights=state.init_weights)
