"""Command-line entry point: ``adail <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 check failure.
Failures print a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import IMITATION, ConfigError, parse_config
from .envs import GridSpec, get_family, read_demos, write_demos

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
DEFAULT_ROOT = "runs"


class CheckFailed(RuntimeError):
    pass


def run_root() -> Path:
    return Path(os.environ.get("ADAIL_RUN_ROOT", DEFAULT_ROOT))


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="flat 'section.key = value' file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--family")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default under $ADAIL_RUN_ROOT)")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adail")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train-expert", help="PPO expert at the source domain")
    _common(p)

    p = sub.add_parser("collect-demos", help="roll out a trained expert")
    _common(p, config=False)
    p.add_argument("--expert", required=True, help="expert run directory")
    p.add_argument("--n", type=int, default=16)

    p = sub.add_parser("train", help="train an imitation learner or a baseline")
    _common(p)
    p.add_argument("--algorithm")
    p.add_argument("--demos")

    for verb in ("eval-grid", "rmse-grid"):
        p = sub.add_parser(verb)
        _common(p, config=False)
        p.add_argument("--run", required=True, help="trained run directory")
        p.add_argument("--context", help="none | true | posterior | random (default: by algorithm)")
        p.add_argument("--episodes", type=int)
        p.add_argument("--cells", type=int)

    p = sub.add_parser("check", help="run the internal invariant suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("replay", help="re-run a finished run from its snapshot and compare metrics")
    p.add_argument("--run", required=True)
    return parser


def _resolve(args, algorithm=None):
    overrides = list(args.overrides)
    if args.family:
        overrides.insert(0, f"run.family={args.family}")
    if algorithm:
        overrides.insert(0, f"run.algorithm={algorithm}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.workers != 1:
        overrides.append(f"run.workers={args.workers}")
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = parse_config(args.config, overrides)
    cfg.run.output_dir = str(args.out) if args.out else str(
        run_root() / f"{cfg.run.algorithm}_{cfg.run.family}_seed{cfg.run.seed}")
    return cfg


def cmd_train_expert(args):
    from .trainer import train_expert
    cfg = _resolve(args, "expert")
    res = train_expert(cfg)
    return {"run": cfg.run.output_dir, "reached_target": bool(res.reached_target), "target": res.target,
            "iterations": len(res.metrics)}


def cmd_collect_demos(args):
    from .trainer import collect_demos, load_policy
    run = Path(args.expert)
    policy_base = run / "final" / "policy"
    if not Path(f"{policy_base}.ckpt").is_file():
        raise FileNotFoundError(f"no expert checkpoint under {run}")
    cfg = parse_config(run / "config.snapshot")
    family = get_family(cfg.run.family)
    seed = cfg.run.seed if args.seed is None else args.seed
    demos = collect_demos(load_policy(policy_base), family, family.source_values, args.n, seed)
    out = Path(args.out) if args.out else run / "demos.ndjson"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_demos(out, demos, family)
    return {"demos": str(out), "count": demos.count, "mean_return": float(np.mean(demos.episode_returns))}


def cmd_train(args):
    from .trainer import train
    algorithm = args.algorithm
    if algorithm is None and not args.config and not any(o.startswith("run.algorithm=") for o in args.overrides):
        raise ConfigError("--algorithm required")
    cfg = _resolve(args, algorithm)
    if args.demos:
        cfg.run.demos = args.demos
    demos = None
    if cfg.run.algorithm in IMITATION:
        if not cfg.run.demos:
            raise ConfigError("demos required for imitation algorithms (--demos PATH)")
        if not Path(cfg.run.demos).is_file():
            raise ConfigError(f"demos file not found: {cfg.run.demos}")
        demos = read_demos(cfg.run.demos)
        out = Path(cfg.run.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if Path(cfg.run.demos).resolve() != (out / "demos.ndjson").resolve():
            shutil.copyfile(cfg.run.demos, out / "demos.ndjson")
        cfg.run.demos = str(out / "demos.ndjson")
    train(cfg, demos)
    return {"run": cfg.run.output_dir, "algorithm": cfg.run.algorithm}


def _load_run(run_dir):
    from .trainer import load_encoder, load_policy, load_posterior
    from .vae import EncoderContext
    run = Path(run_dir)
    if not (run / "config.snapshot").is_file():
        raise FileNotFoundError(f"{run} is not a run directory (no config.snapshot)")
    cfg = parse_config(run / "config.snapshot")
    policy = load_policy(run / "final" / "policy")
    posterior = None
    if (run / "final" / "posterior.ckpt").is_file():
        posterior = load_posterior(run / "final" / "posterior.ckpt", cfg.posterior.delta)
    elif (run / "final" / "encoder.ckpt").is_file():
        posterior = EncoderContext(load_encoder(run / "final" / "encoder.ckpt"))
    return cfg, policy, posterior


def _eval_setup(args):
    from .evaluation import blackout_region
    cfg, policy, posterior = _load_run(args.run)
    family = get_family(cfg.run.family)
    cells = args.cells or cfg.eval.cells
    grid = GridSpec.for_family(family, cells)
    mask = None
    if cfg.run.blackout not in ("", "none"):
        mask = blackout_region(grid, cfg.run.blackout, grid.cell_of(family.source_values))
    seed = cfg.run.seed if args.seed is None else args.seed
    episodes = args.episodes or cfg.eval.episodes_per_cell
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    return cfg, policy, posterior, family, grid, mask, seed, episodes, out


def cmd_eval_grid(args):
    from .evaluation import grid_eval, write_heatmap
    cfg, policy, posterior, family, grid, mask, seed, episodes, out = _eval_setup(args)
    ctx = args.context or cfg.eval_context()
    h = grid_eval(policy, family, grid, ctx, episodes, seed, posterior=posterior,
                  beta=cfg.posterior.ema_beta, mask=mask)
    paths = write_heatmap(h, out / f"returns_{ctx}")
    mean, std = h.aggregate()
    return {"heatmap": paths["csv"], "grid_mean": mean, "grid_std": std}


def cmd_rmse_grid(args):
    from .evaluation import posterior_rmse_grid, write_heatmap, write_rmse_csv
    from .posterior import Posterior
    cfg, policy, posterior, family, grid, mask, seed, episodes, out = _eval_setup(args)
    if not isinstance(posterior, Posterior):
        raise ConfigError("rmse-grid needs a run with a supervised posterior")
    ctx = args.context or "posterior"
    h = posterior_rmse_grid(posterior, policy, family, grid, episodes, seed, ctx, cfg.posterior.ema_beta, mask)
    paths = write_heatmap(h, out / "rmse")
    write_rmse_csv(h, out / "rmse_per_dim.csv")
    return {"heatmap": paths["csv"], "grid_mean": h.aggregate()[0]}


def cmd_check(args):
    from .checks import run_all
    results = run_all(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    passed = sum(ok for _, ok, _ in results)
    summary = {"passed": passed, "failed": len(results) - passed}
    if summary["failed"]:
        raise CheckFailed(json.dumps(summary))
    return summary


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_replay(args):
    from .trainer import train
    run = Path(args.run)
    metrics = run / "metrics.csv"
    if not metrics.is_file() or not (run / "config.snapshot").is_file():
        raise FileNotFoundError(f"{run} has no finished run to replay")
    cfg = parse_config(run / "config.snapshot")
    demos = None
    if cfg.run.algorithm in IMITATION:
        demos = read_demos(run / "demos.ndjson")
    with tempfile.TemporaryDirectory() as tmp:
        cfg.run.output_dir = tmp
        train(cfg, demos)
        new_hash = sha256_file(Path(tmp) / "metrics.csv")
    old_hash = sha256_file(metrics)
    if new_hash != old_hash:
        raise CheckFailed(f"metrics.csv hash mismatch: {old_hash} != {new_hash}")
    return {"run": str(run), "sha256": old_hash, "identical": True}


COMMANDS = {
    "train-expert": cmd_train_expert, "collect-demos": cmd_collect_demos, "train": cmd_train,
    "eval-grid": cmd_eval_grid, "rmse-grid": cmd_rmse_grid, "check": cmd_check, "replay": cmd_replay,
}


def _fail(code, exc):
    sys.stderr.write(json.dumps({"status": "error", "code": code, "error": type(exc).__name__,
                                 "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        result = COMMANDS[args.verb](args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except CheckFailed as exc:
        return _fail(EXIT_CHECK, exc)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps({"status": "ok", **result}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
