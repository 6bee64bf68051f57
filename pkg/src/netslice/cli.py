"""Command line entry point: ``netslice {gen-data,train,eval,compare}``."""

from __future__ import annotations

import argparse
import sys

from .harness import RunConfig, cmd_compare, cmd_eval, cmd_gen_data, cmd_train, with_overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--out", help="output directory (overrides [output] dir)")
    common.add_argument("--seed-workload", type=int)
    common.add_argument("--seed-init", type=int)
    common.add_argument("--seed-explore", type=int)
    common.add_argument("--mode", choices=["arrival", "batch"])
    common.add_argument("--budget-level", type=int, choices=[0, 1, 2, 3],
                        help="run a single budget level instead of the configured list")
    common.add_argument("--workers", type=int, help="evaluation worker processes")

    ap = argparse.ArgumentParser(prog="netslice", description="Network slicing allocation experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic traces and a manifest")
    sub.add_parser("train", parents=[common], help="train policies, one pair per budget level")
    p = sub.add_parser("eval", parents=[common], help="evaluate trained policies")
    p.add_argument("--checkpoints", help="directory holding policy_c*.ckpt (default: --out)")
    p = sub.add_parser("compare", parents=[common], help="trained policies against equal slicing")
    p.add_argument("--checkpoints", help="directory holding policy_c*.ckpt (default: --out)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_ini(args.config) if args.config else RunConfig()
        cfg = with_overrides(cfg, out=args.out, seed_workload=args.seed_workload,
                             seed_init=args.seed_init, seed_explore=args.seed_explore,
                             mode=args.mode, budget_level=args.budget_level, workers=args.workers)
        if args.command == "gen-data":
            files = cmd_gen_data(cfg)
            print(f"wrote {len(files)} trace files to {cfg.out_dir}")
        elif args.command == "train":
            return cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoints)
        else:
            table = cmd_compare(cfg, args.checkpoints)
            for s in table.summary():
                print(f"c={s['budget_level']} {s['resource']}: total winner {s['total_winner']}")
    except (OSError, ValueError) as e:
        print(f"netslice: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
