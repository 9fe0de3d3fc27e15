"""Command-line entry points: train, coverage, diag, gradcheck, compare."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import harness
from .config import RunConfig, load_config
from .coverage import CoverageParams, coverage_raw, coverage_resample, monte_carlo_coverage
from .diagnostics import (
    METRICS_COLUMNS,
    compute_step_metrics,
    metrics_row,
    pass_at_k,
    read_audit_log,
    read_trajectory_log,
)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--algorithm", choices=("grpo", "axpo"))
    p.add_argument("--env", dest="env_preset", help="environment preset name")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--steps", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--questions-per-step", dest="questions_per_step", type=int)
    p.add_argument("--resample-ratio", dest="resample_ratio", type=float)
    p.add_argument("--resample-k", dest="resample_k", type=int)
    p.add_argument("--eps-low", dest="eps_low", type=float)
    p.add_argument("--eps-high", dest="eps_high", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", dest="epochs_per_batch", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-rollouts", dest="eval_rollouts", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--out", dest="out_dir")


_TRAIN_KEYS = (
    "algorithm",
    "env_preset",
    "steps",
    "group_size",
    "questions_per_step",
    "resample_ratio",
    "resample_k",
    "eps_low",
    "eps_high",
    "beta",
    "learning_rate",
    "epochs_per_batch",
    "temperature",
    "eval_every",
    "eval_rollouts",
    "checkpoint_every",
    "out_dir",
)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line overrides on top."""
    cfg = RunConfig()
    if args.config is not None:
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.seeds is not None:
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if overrides:
        import dataclasses

        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    out_dir = harness.train(cfg)
    print(f"run complete: {out_dir}")
    return 0


def cmd_coverage(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.random > 0:
        for _ in range(args.random):
            rows.append((rng.random(), rng.random(), rng.random(), args.n))
    else:
        rows.append((args.q, args.p_tool, args.p_prefix, args.n))
    print("q,p_tool,p_prefix,n,raw_closed,resample_closed,raw_mc,resample_mc,margin")
    for q, p_tool, p_prefix, n in rows:
        params = CoverageParams(q=q, p_tool=p_tool, p_prefix=p_prefix, n=n)
        raw_cf = coverage_raw(q, p_tool, n)
        res_cf = coverage_resample(p_prefix, n)
        mc = monte_carlo_coverage(params, args.trials, rng)
        print(
            f"{q!r},{p_tool!r},{p_prefix!r},{n},"
            f"{raw_cf!r},{res_cf!r},{mc.raw_estimate!r},{mc.resample_estimate!r},"
            f"{res_cf - raw_cf!r}"
        )
    return 0


def recompute_metrics(sdir: Path) -> list[str]:
    """Rebuild every metrics row from the persisted logs of one seed dir."""
    train_by_step = read_trajectory_log(sdir / harness.TRAJECTORY_LOG)
    eval_by_step = read_trajectory_log(sdir / harness.EVAL_LOG)
    audit_by_step = read_audit_log(sdir / harness.AUDIT_LOG)

    def eval_passes(step: int) -> tuple[Optional[float], Optional[float]]:
        records = eval_by_step.get(step)
        if not records:
            return None, None
        rewards: dict[int, list[int]] = {}
        for t in records:
            rewards.setdefault(t.question_id, []).append(t.reward)
        k = min(len(v) for v in rewards.values())
        return pass_at_k(rewards, 1), pass_at_k(rewards, 4) if k >= 4 else None

    steps = sorted(set(train_by_step) | set(eval_by_step))
    lines = [",".join(METRICS_COLUMNS)]
    for step in steps:
        pass1, pass4 = eval_passes(step)
        records = train_by_step.get(step, eval_by_step.get(step, []))
        metrics = compute_step_metrics(step, records, audit_by_step.get(step, []), pass1, pass4)
        lines.append(metrics_row(metrics))
    return lines


def cmd_diag(args: argparse.Namespace) -> int:
    for line in recompute_metrics(args.run_dir):
        print(line)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = harness.gradcheck(num_checks=args.checks, h=args.h, seed=args.seed)
    print(
        f"checked={report.configs_checked} kinks_excluded={report.kinks_excluded} "
        f"max_abs_error={report.max_abs_error:.3e}"
    )
    return 0 if report.passed else 1


def cmd_compare(args: argparse.Namespace) -> int:
    result = harness.compare(args.run_a, args.run_b)
    print(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="axpo")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run training for every configured seed")
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_cov = sub.add_parser("coverage", help="closed-form vs Monte Carlo coverage sweep (CSV)")
    p_cov.add_argument("--q", type=float, default=0.3)
    p_cov.add_argument("--p-tool", dest="p_tool", type=float, default=0.2)
    p_cov.add_argument("--p-prefix", dest="p_prefix", type=float, default=0.2)
    p_cov.add_argument("--n", type=int, default=4)
    p_cov.add_argument("--random", type=int, default=0, help="emit this many random rows instead")
    p_cov.add_argument("--trials", type=int, default=200000)
    p_cov.add_argument("--seed", type=int, default=0)
    p_cov.set_defaults(func=cmd_coverage)

    p_diag = sub.add_parser("diag", help="recompute metrics from a seed dir's logs")
    p_diag.add_argument("run_dir", type=Path)
    p_diag.set_defaults(func=cmd_diag)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--checks", type=int, default=12)
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_cmp = sub.add_parser("compare", help="final-metric deltas between two run dirs")
    p_cmp.add_argument("run_a", type=Path)
    p_cmp.add_argument("run_b", type=Path)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
