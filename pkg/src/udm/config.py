"""Experiment configuration: TOML in, validated and fully resolved out.

A config has a top-level ``task`` with that task's operator parameters next
to it, plus optional ``[image]``, ``[schedule]``, ``[sampler]``,
``[denoiser]``, ``[training]`` and ``[run]`` tables. Unknown keys are
errors. ``delta`` and ``t_delta`` are "matched" when omitted: an omitted
``delta`` is ``sigma_t^2`` at ``t_delta``, an omitted ``t_delta`` is the
step whose ``sigma_t^2`` is closest to ``delta``.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from pathlib import Path

import tomli
import tomlkit

from .errors import ConfigError
from .operators import TASK_DEFAULTS, TASKS

REQUIRED = ("task",)

SECTION_DEFAULTS = {
    "image": {"shape": [1, 8, 8], "sigma": 0.05},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "sampler": {
        "K": 3,
        "N": [3],
        "delta": None,
        "t_delta": None,
        "spacing": "uniform",
        "eta": 0.0,
        "init_weights": [0.5, 0.5],
        "chains": 1,
        "fresh_noise_per_module": True,
    },
    "denoiser": {
        "kind": "gaussian_analytic",
        "mean": 0.5,
        "pixel_std": 0.2,
        "corr_length": 2.0,
        "power": 1.5,
        "cov_scale": 1.0,
        "adapter": None,
    },
    "training": {
        "enabled": False,
        "rank": 5,
        "lr": 1e-4,
        "steps": 200,
        "batch": 4,
        "sigma_train": None,
        "weight_decay": 0.01,
    },
    "run": {"seeds": [0], "sigma_test": None, "output": "udm_out", "oracle": True, "previews": True},
}

LIST_KEYS = {("sampler", "N"), ("sampler", "delta"), ("run", "seeds"), ("run", "sigma_test")}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    task_params: dict
    image: dict
    schedule: dict
    sampler: dict
    denoiser: dict
    training: dict
    run: dict

    def to_dict(self) -> dict:
        out = {"task": self.task, **self.task_params}
        for name in SECTION_DEFAULTS:
            out[name] = copy.deepcopy(getattr(self, name))
        return out

    @property
    def sigma_train(self) -> float:
        s = self.training["sigma_train"]
        return self.image["sigma"] if s is None else s

    @property
    def sigma_tests(self) -> list:
        s = self.run["sigma_test"]
        return [self.image["sigma"]] if s is None else list(s)


_DUP = re.compile(r"Cannot overwrite a value \(at line (\d+), column (\d+)\)")
_DUP_TABLE = re.compile(r"Cannot declare \((.*)\) twice \(at line (\d+), column (\d+)\)")


def _decode(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        msg = str(exc)
        m = _DUP.search(msg)
        if m:
            line = int(m.group(1))
            src = text.splitlines()[line - 1] if line <= len(text.splitlines()) else ""
            key = src.split("=", 1)[0].strip() or "?"
            raise ConfigError(f"duplicate key {key!r} at line {line}", code="duplicate_key", key=key, line=line) from exc
        m = _DUP_TABLE.search(msg)
        if m:
            key = ".".join(part.strip(" '\"") for part in m.group(1).split(",") if part.strip())
            line = int(m.group(2))
            raise ConfigError(f"duplicate table {key!r} at line {line}", code="duplicate_key", key=key, line=line) from exc
        raise ConfigError(f"malformed config: {msg}", code="syntax") from exc


def _fail(problems):
    raise ConfigError("; ".join(problems), code="invalid_config", problems=problems)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}", code="missing_keys", missing=missing)
    task = raw.pop("task")
    if task not in TASKS:
        _fail([f"unknown task {task!r} (known: {', '.join(TASKS)})"])
    problems = []
    sections = {}
    for name, defaults in SECTION_DEFAULTS.items():
        given = raw.pop(name, {})
        if not isinstance(given, dict):
            problems.append(f"[{name}] must be a table")
            continue
        for key in given:
            if key not in defaults:
                problems.append(f"unknown key {name}.{key}")
        merged = {**defaults, **given}
        for key in merged:
            if (name, key) in LIST_KEYS and merged[key] is not None and not isinstance(merged[key], list):
                merged[key] = [merged[key]]
        sections[name] = merged
    params = dict(TASK_DEFAULTS[task])
    for key, value in raw.items():
        if key in params:
            params[key] = value
        else:
            problems.append(f"unknown key {key!r}")
    if problems:
        _fail(problems)
    cfg = ExperimentConfig(task, params, **sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    p = []
    shape = cfg.image["shape"]
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        p.append("image.shape must be [C, H, W] with positive entries")
    if not cfg.image["sigma"] > 0:
        p.append("image.sigma must be positive")
    sch = cfg.schedule
    if sch["T"] < 1:
        p.append("schedule.T must be >= 1")
    if not 0 < sch["beta_start"] <= sch["beta_end"] < 1:
        p.append("schedule betas must satisfy 0 < beta_start <= beta_end < 1")
    s = cfg.sampler
    if s["K"] < 1:
        p.append("sampler.K must be >= 1")
    if any(n < 1 or n > sch["T"] for n in s["N"]):
        p.append(f"sampler.N entries must lie in [1, {sch['T']}]")
    if s["delta"] is not None and any(d <= 0 for d in s["delta"]):
        p.append("sampler.delta entries must be positive")
    if s["t_delta"] is not None and not 1 <= s["t_delta"] <= sch["T"]:
        p.append("sampler.t_delta out of range")
    if s["spacing"] not in ("uniform", "quadratic"):
        p.append("sampler.spacing must be 'uniform' or 'quadratic'")
    if not 0 <= s["eta"] <= 1:
        p.append("sampler.eta must lie in [0, 1]")
    w = s["init_weights"]
    if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1) > 1e-12:
        p.append("sampler.init_weights must be a convex pair")
    if s["chains"] < 1:
        p.append("sampler.chains must be >= 1")
    d = cfg.denoiser
    if d["kind"] != "gaussian_analytic":
        p.append("denoiser.kind must be 'gaussian_analytic'")
    if d["cov_scale"] <= 0 or d["pixel_std"] <= 0:
        p.append("denoiser.cov_scale and pixel_std must be positive")
    if d["adapter"] is not None and not Path(d["adapter"]).exists():
        p.append(f"denoiser.adapter file {d['adapter']!r} does not exist")
    t = cfg.training
    if t["rank"] < 1 or t["steps"] < 1 or t["batch"] < 1 or t["lr"] < 0:
        p.append("training needs rank, steps, batch >= 1 and lr >= 0")
    if any(v <= 0 for v in cfg.sigma_tests) or cfg.sigma_train <= 0:
        p.append("noise levels must be positive")
    if not cfg.run["seeds"]:
        p.append("run.seeds must be nonempty")
    if p:
        _fail(p)


def parse_config_text(text: str) -> ExperimentConfig:
    return config_from_dict(_decode(text))


def parse_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", code="io") from exc
    return parse_config_text(text)


def serialize_config(cfg: ExperimentConfig) -> str:
    """TOML text; ``None`` values (meaning "matched" or "unset") are omitted."""
    doc = tomlkit.document()
    data = cfg.to_dict()
    for key, value in data.items():
        if key not in SECTION_DEFAULTS and value is not None:
            doc[key] = value
    for name in SECTION_DEFAULTS:
        table = tomlkit.table()
        for key, value in data[name].items():
            if value is not None:
                table[key] = value
        doc[name] = table
    return tomlkit.dumps(doc)
