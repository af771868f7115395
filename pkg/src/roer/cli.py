"""Command-line entry points.

Subcommands: train, sweep, oracle, bias, replay-inspect. Exit codes:
0 success, 1 check or run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import config as config_mod
from . import harness
from .replay import PriorityBuffer
from .schemes import ConfigError

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "output_dir", None):
        from dataclasses import replace
        cfg = replace(cfg, output_dir=args.output_dir)
    if getattr(args, "workers", None):
        from dataclasses import replace
        cfg = replace(cfg, workers=args.workers)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = harness.run_train(cfg)
    print(f"run complete: {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = harness.run_sweep(cfg)
    summary = json.loads((out / "sweep_summary.json").read_text())
    failed = [c["cell"] for c in summary["cells"] if c.get("failed")]
    print(f"sweep complete: {out} ({len(summary['cells'])} cells, "
          f"{len(failed)} failed)")
    return EXIT_CHECK_FAILURE if failed else EXIT_OK


def cmd_oracle(args) -> int:
    report, ok = harness.run_oracle_suite(
        corrupt_kind=args.corrupt, report_path=args.report
    )
    for r in report:
        status = "pass" if r["passed"] else "FAIL"
        kind = f" [{r['kind']}]" if "kind" in r else ""
        print(f"{status}  {r['check']}{kind}: measured {r['measured']:.3e} "
              f"(tolerance {r['tolerance']:.3e})")
    print("oracle suite:", "all checks passed" if ok else "CHECKS FAILED")
    return EXIT_OK if ok else EXIT_CHECK_FAILURE


def cmd_bias(args) -> int:
    cfg = _load_config(args)
    series = harness.estimate_bias(args.run_dir, cfg, seed=args.seed)
    payload = json.dumps(series, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def cmd_replay_inspect(args) -> int:
    buf = PriorityBuffer.load(args.snapshot)
    pri = buf.priorities
    print(f"capacity {buf.capacity}  size {buf.size}  cursor {buf.write_cursor}")
    print(f"discrete {buf.discrete}  state_dim {buf.state_dim}  "
          f"action_dim {buf.action_dim}")
    print(f"priority total {buf.total_priority():.6g}  "
          f"min {pri.min():.6g}  max {pri.max():.6g}  mean {pri.mean():.6g}")
    if buf.discrete:
        dist = buf.implied_distribution()
        top = sorted(dist.items(), key=lambda kv: -kv[1])[: args.top]
        print("implied distribution (top buckets):")
        for (s, a), p in top:
            print(f"  state {s} action {a}: {p:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roer",
        description="Prioritized-replay experiments with exact tabular oracles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop for every seed")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid sweep over config overrides")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="run the oracle verification suite")
    p.add_argument("--report", help="write a JSON report here")
    p.add_argument("--corrupt", help="negative control: corrupt this kind")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bias", help="value-bias series from run checkpoints")
    p.add_argument("run_dir", help="a seed directory of a finished run")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("replay-inspect", help="summarize a buffer snapshot")
    p.add_argument("snapshot")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_replay_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
