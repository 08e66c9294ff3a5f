"""Small Gaussian problems with closed-form posteriors.

Everything here lives on 8x8 single-channel images so the dense oracles in
:mod:`udm.verification` stay cheap. The defaults are the settings used by the
acceptance suite; see the README for why the blur is mild.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserSpec, GaussianAnalytic, GaussianPrior, image_prior
from .numerics import RngStream
from .operators import Blur, MeasurementModel, build_gaussian_kernel, measure
from .sampler import UnfoldedSamplerConfig
from .schedule import NoiseSchedule, build_linear_schedule, t_for_sigma_sq

TOY_SHAPE = (1, 8, 8)


@dataclass(frozen=True)
class GaussianToy:
    prior: GaussianPrior
    model: MeasurementModel
    schedule: NoiseSchedule
    x_true: np.ndarray
    y: np.ndarray


def toy_blur_model(sigma=0.05, size=3, bandwidth=0.5) -> MeasurementModel:
    return MeasurementModel(Blur(build_gaussian_kernel(size, bandwidth)), sigma)


def gaussian_toy(seed=1, model: MeasurementModel | None = None, prior: GaussianPrior | None = None, schedule=None):
    """Draw ``x_true`` from the prior and a measurement ``y`` of it."""
    prior = image_prior(TOY_SHAPE) if prior is None else prior
    model = toy_blur_model() if model is None else model
    schedule = build_linear_schedule() if schedule is None else schedule
    stream = RngStream(seed, 0)
    x_true = prior.sample(stream)
    return GaussianToy(prior, model, schedule, x_true, measure(model, x_true, stream))


def toy_config(toy: GaussianToy, delta, K=3, init_weights=(1.0, 0.0), denoiser_prior=None) -> UnfoldedSamplerConfig:
    """Sampler config whose ``t_delta`` is matched to ``delta``."""
    base = GaussianAnalytic(toy.prior if denoiser_prior is None else denoiser_prior)
    t_delta = t_for_sigma_sq(toy.schedule, delta)
    return UnfoldedSamplerConfig(
        DenoiserSpec(base, toy.schedule), K=K, delta=delta, t_delta=t_delta, init_weights=init_weights
    )
