"""Command line entry point: ``udm sample|train|verify|bench|schedule``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .errors import UdmError


def _write_rows(rows, out):
    if not rows:
        return
    handle = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(handle, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            handle.close()


def cmd_sample(args) -> int:
    from dataclasses import replace

    from .config import parse_config, validate
    from .runner import run_experiment, with_sampler

    cfg = parse_config(args.config)
    if args.task is not None and args.task != cfg.task:
        raise UdmError(f"--task {args.task} disagrees with config task {cfg.task}", code="bad_config")
    overrides = {
        "N": None if args.n_steps is None else [args.n_steps],
        "K": args.k_modules,
        "delta": None if args.delta is None else [args.delta],
        "t_delta": args.t_delta,
        "chains": args.samples,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = with_sampler(cfg, **overrides)
    if args.seed is not None:
        cfg = replace(cfg, run={**cfg.run, "seeds": [args.seed]})
    validate(cfg)
    out = args.out or cfg.run["output"]
    manifest, rows = run_experiment(cfg, out, workers=args.workers)
    print(f"{manifest['rows']} rows, {manifest['failed_rows']} failed -> {Path(out) / 'results.csv'}")
    return 0 if manifest["failed_rows"] == 0 else 1


def cmd_train(args) -> int:
    from dataclasses import replace

    from .config import config_from_dict, parse_config
    from .runner import build_problem, delta_points, make_model, sampler_config
    from .training import train_adapter

    cfg = parse_config(args.config) if args.config else config_from_dict({"task": args.task or "deblur_gauss"})
    if args.task and args.task != cfg.task:
        raise UdmError(f"--task {args.task} disagrees with config task {cfg.task}", code="bad_config")
    training = dict(cfg.training)
    for key in ("steps", "lr", "rank"):
        if getattr(args, key) is not None:
            training[key] = getattr(args, key)
    cfg = replace(cfg, training=training)
    seed = args.seed if args.seed is not None else cfg.run["seeds"][0]
    problem = build_problem(cfg)
    delta, t_delta = delta_points(cfg, problem.schedule)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = train_adapter(
        sampler_config(cfg, problem, delta, t_delta),
        make_model(cfg, problem, seed, cfg.sigma_train),
        problem.data_prior,
        training["steps"],
        lr=training["lr"],
        seed=seed,
        rank=training["rank"],
        batch_size=training["batch"],
        weight_decay=training["weight_decay"],
        checkpoint_path=out / "adapter.udmt",
    )
    _write_rows([{"step": i + 1, "loss": v} for i, v in enumerate(state.loss_trace)], out / "loss.csv")
    print(f"trained {state.step} steps, final loss {state.loss_trace[-1]:.6g} -> {out / 'adapter.udmt'}")
    return 0


def cmd_verify(args) -> int:
    from .checks import run_checks

    results = run_checks(args.what)
    _write_rows([{"check": name, "passed": ok, "detail": detail} for name, ok, detail in results], args.out)
    return 0 if all(ok for _, ok, _ in results) else 1


def cmd_bench(args) -> int:
    from .bench import bench_prox, bench_sampler

    rows = []
    if args.kind in ("prox", "all"):
        dims = [(s, s) for s in args.sizes]
        rows += bench_prox(dims, tuple(args.operators), args.repeats)
    if args.kind in ("sampler", "all"):
        from .toys import gaussian_toy, toy_config

        toy = gaussian_toy()
        grid = [(k, n) for k in (1, 3) for n in (1, 3, 9)]
        srows, fit = bench_sampler(grid, lambda k: toy_config(toy, 0.005, K=k), toy.y, toy.model, args.repeats)
        rows += srows
        print(f"# wall time vs K*N: slope {fit['slope']:.4g} ms, max rel deviation {fit['max_rel_dev']:.2f}", file=sys.stderr)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    _write_rows([{k: r.get(k, "") for k in keys} for r in rows], args.out)
    return 0


def cmd_schedule(args) -> int:
    from .schedule import build_linear_schedule

    s = build_linear_schedule(args.T, args.beta_start, args.beta_end)
    rows = [
        {"t": t, "beta": s.beta[t - 1] if t else 0.0, "alpha_bar": s.alpha_bar[t], "sigma_t_sq": s.sigma_t_sq[t]}
        for t in range(s.T + 1)
    ]
    _write_rows([{k: repr(float(v)) if k != "t" else v for k, v in r.items()} for r in rows], args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udm", description="Unfolded conditional diffusion sampling toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="run the experiment described by a config")
    s.add_argument("--config", required=True)
    s.add_argument("--task", help="must match the config's task if given")
    s.add_argument("--out", "--out-dir", dest="out")
    s.add_argument("--workers", type=int, help="worker threads (default: $UDM_THREADS or 1)")
    s.add_argument("--n-steps", type=int, help="outer steps N")
    s.add_argument("--k-modules", type=int, help="unfolded modules K")
    s.add_argument("--delta", type=float)
    s.add_argument("--t-delta", type=int)
    s.add_argument("--samples", type=int, help="chains per measurement")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="train the low-rank adapter end to end")
    t.add_argument("--task")
    t.add_argument("--config")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--rank", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="check fast kernels against dense oracles")
    v.add_argument("what", nargs="?", default="all", choices=["all", "prox", "adjoint", "denoiser", "schedule", "grad"])
    v.add_argument("--out", help="CSV path (default: stdout)")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time prox solvers and the sampler")
    b.add_argument("kind", nargs="?", default="prox", choices=["prox", "sampler", "all"])
    b.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    b.add_argument("--operators", nargs="+", default=["deblur", "inpaint", "sr2", "sr4"])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    sc = sub.add_parser("schedule", help="schedule utilities")
    sc.add_argument("action", choices=["dump"])
    sc.add_argument("--T", type=int, default=1000)
    sc.add_argument("--beta-start", type=float, default=1e-4)
    sc.add_argument("--beta-end", type=float, default=0.02)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_schedule)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UdmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
