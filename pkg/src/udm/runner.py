"""Experiment runner: sweeps, metrics, CSV rows and a replay manifest.

Rows are produced in a fixed order (sigma_test, delta, N, seed) and each
chain draws only from ``RngStream(seed, chain)``, so results do not depend
on how many worker threads run them. The worker count comes from the
``UDM_THREADS`` environment variable unless passed explicitly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor_io
from .config import ExperimentConfig, serialize_config
from .denoiser import DenoiserSpec, GaussianAnalytic, image_prior
from .errors import UdmError
from .numerics import RngStream
from .operators import MeasurementModel, build_operator, measure
from .sampler import NfeCounter, UnfoldedSamplerConfig, conditional_diffusion_sample
from .schedule import build_linear_schedule, make_time_grid, t_for_sigma_sq
from .verification import (
    MAX_DENSE_DIM,
    DenseGaussian,
    dense_posterior,
    gaussian_w2,
    psnr,
    relative_error,
)

CSV_COLUMNS = (
    "task",
    "K",
    "N",
    "delta",
    "sigma_train",
    "sigma_test",
    "seed",
    "psnr",
    "w2",
    "mean_rel_err",
    "nfe_denoiser",
    "nfe_init",
    "wall_ms",
    "status",
)
MANIFEST_VERSION = 1


def worker_count(explicit=None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    try:
        return max(1, int(os.environ.get("UDM_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Problem:
    """Everything one experiment shares across its rows."""

    schedule: object
    shape: tuple
    data_prior: object
    denoiser: DenoiserSpec


def build_problem(cfg: ExperimentConfig) -> Problem:
    sch = build_linear_schedule(cfg.schedule["T"], cfg.schedule["beta_start"], cfg.schedule["beta_end"])
    shape = tuple(int(s) for s in cfg.image["shape"])
    d = cfg.denoiser
    prior = image_prior(shape, d["mean"], d["pixel_std"], d["corr_length"], d["power"])
    spec = DenoiserSpec(GaussianAnalytic(prior.scaled(d["cov_scale"])), sch)
    if d["adapter"] is not None:
        spec = spec.with_adapter(tensor_io.load_checkpoint(d["adapter"]).adapter)
    return Problem(sch, shape, prior, spec)


def delta_points(cfg: ExperimentConfig, schedule):
    """``(delta, t_delta)`` pairs of the sweep, resolving "matched" values."""
    s = cfg.sampler
    if s["delta"] is None:
        t_delta = s["t_delta"] if s["t_delta"] is not None else None
        if t_delta is None:
            from .schedule import default_t_delta

            t_delta = default_t_delta(schedule)
        return [(float(schedule.sigma_t_sq[t_delta]), int(t_delta))]
    out = []
    for delta in s["delta"]:
        t_delta = s["t_delta"] if s["t_delta"] is not None else t_for_sigma_sq(schedule, delta)
        out.append((float(delta), int(t_delta)))
    return out


def sampler_config(cfg: ExperimentConfig, problem: Problem, delta, t_delta, adapter=None, init_weights=None):
    spec = problem.denoiser if adapter is None else problem.denoiser.with_adapter(adapter)
    s = cfg.sampler
    return UnfoldedSamplerConfig(
        spec,
        K=s["K"],
        delta=delta,
        t_delta=t_delta,
        init_weights=tuple(init_weights or s["init_weights"]),
        fresh_noise_per_module=s["fresh_noise_per_module"],
        eta=s["eta"],
    )


def make_model(cfg: ExperimentConfig, problem: Problem, seed, sigma) -> MeasurementModel:
    op = build_operator(cfg.task, cfg.task_params, problem.shape, RngStream(seed, 1))
    return MeasurementModel(op, sigma)


def ground_truth(problem: Problem, model: MeasurementModel, seed):
    stream = RngStream(seed, 0)
    x_true = problem.data_prior.sample(stream)
    return x_true, measure(model, x_true, stream)


def train_for(cfg, problem, delta, t_delta, checkpoint=None):
    from .training import train_adapter

    t = cfg.training
    seed = cfg.run["seeds"][0]
    model = make_model(cfg, problem, seed, cfg.sigma_train)
    base = sampler_config(cfg, problem, delta, t_delta)
    return train_adapter(
        base,
        model,
        problem.data_prior,
        t["steps"],
        lr=t["lr"],
        seed=seed,
        rank=t["rank"],
        batch_size=t["batch"],
        weight_decay=t["weight_decay"],
        checkpoint_path=checkpoint,
    )


@dataclass
class RowResult:
    row: dict
    samples: np.ndarray | None
    x_true: np.ndarray
    y: np.ndarray


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def run_point(cfg, problem, sampler_cfg, n_steps, sigma_test, seed, workers=1) -> RowResult:
    """One CSV row: ``chains`` conditional samples of one measurement."""
    start = time.perf_counter()
    row = {
        "task": cfg.task,
        "K": sampler_cfg.K,
        "N": n_steps,
        "delta": sampler_cfg.delta,
        "sigma_train": cfg.sigma_train,
        "sigma_test": sigma_test,
        "seed": seed,
        "psnr": math.nan,
        "w2": math.nan,
        "mean_rel_err": math.nan,
        "nfe_denoiser": 0,
        "nfe_init": 0,
    }
    model = make_model(cfg, problem, seed, sigma_test)
    x_true, y = ground_truth(problem, model, seed)
    samples = None
    try:
        grid = make_time_grid(problem.schedule, n_steps, cfg.sampler["spacing"])
        chains = cfg.sampler["chains"]

        def one(c):
            return conditional_diffusion_sample(y, model, grid, sampler_cfg, seed, chain=c, shape=problem.shape)

        if workers > 1 and chains > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, range(chains)))
        else:
            results = [one(c) for c in range(chains)]
        samples = np.stack([r[0] for r in results])
        counter: NfeCounter = results[0][1]
        row["nfe_denoiser"] = counter.denoiser_evals
        row["nfe_init"] = counter.initializer_evals
        row["psnr"] = float(np.mean([psnr(s, x_true) for s in samples]))
        if cfg.run["oracle"] and model.is_linear and chains >= 2 and x_true.size <= MAX_DENSE_DIM:
            post = dense_posterior(problem.data_prior, model, y)
            flat = samples.reshape(chains, -1)
            emp = DenseGaussian(samples.mean(axis=0), np.atleast_2d(np.cov(flat, rowvar=False)))
            row["mean_rel_err"] = relative_error(emp.mean, post.mean)
            row["w2"] = gaussian_w2(emp, post)
        row["status"] = "ok"
    except UdmError as exc:
        row["status"] = exc.code
    row["wall_ms"] = (time.perf_counter() - start) * 1e3
    return RowResult(row, samples, x_true, y)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers=None):
    """Run every sweep point; returns ``(manifest, rows)``.

    With ``out_dir`` set, writes ``results.csv``, ``manifest.json``,
    ``config.toml`` and one tensor file per row (chains x C x H x W).
    """
    workers = worker_count(workers)
    problem = build_problem(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "samples").mkdir(parents=True, exist_ok=True)

    trained = {}
    for delta, t_delta in delta_points(cfg, problem.schedule):
        if cfg.training["enabled"]:
            ckpt = None if out is None else out / f"adapter_td{t_delta}.udmt"
            state = train_for(cfg, problem, delta, t_delta, ckpt)
            trained[delta] = sampler_config(cfg, problem, delta, t_delta, state.adapter, state.init_weights)
        else:
            trained[delta] = sampler_config(cfg, problem, delta, t_delta)

    points = [
        (sigma, delta, n, seed)
        for sigma in cfg.sigma_tests
        for delta, _ in delta_points(cfg, problem.schedule)
        for n in cfg.sampler["N"]
        for seed in cfg.run["seeds"]
    ]
    chains_parallel = cfg.sampler["chains"] > 1

    def job(p):
        sigma, delta, n, seed = p
        return run_point(cfg, problem, trained[delta], n, sigma, seed, workers if chains_parallel else 1)

    if workers > 1 and not chains_parallel:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, points))
    else:
        results = [job(p) for p in points]
    rows = [r.row for r in results]

    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "tensor_format_version": tensor_io.VERSION,
        "csv_columns": list(CSV_COLUMNS),
        "config": cfg.to_dict(),
        "seeds": list(cfg.run["seeds"]),
        "rng": "philox4x64, key=(seed, chain)",
        "rows": len(rows),
        "failed_rows": sum(r["status"] != "ok" for r in rows),
    }
    if out is not None:
        (out / "results.csv").write_text(rows_to_csv(rows))
        (out / "config.toml").write_text(serialize_config(cfg))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
        for i, r in enumerate(results):
            tensor_io.write_tensor(out / "samples" / f"row{i:04d}_x_true.udmt", r.x_true)
            tensor_io.write_tensor(out / "samples" / f"row{i:04d}_y.udmt", r.y)
            if r.samples is not None:
                tensor_io.write_tensor(out / "samples" / f"row{i:04d}_samples.udmt", r.samples)
                if cfg.run["previews"] and r.samples.shape[1] in (1, 3):
                    tensor_io.write_image_preview(r.samples[0], out / "samples" / f"row{i:04d}.pnm")
    return manifest, rows


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(type(v))


def with_sampler(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, sampler={**cfg.sampler, **changes})
