"""Command-line entry point.

    coopbev <simulate|train|eval|ablate|gradcheck> [--config PATH]
            [--preset desk|paper-scale] [--seed N] [--out DIR] ...

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import config_hash, load_config
from .errors import CheckpointError, ConfigError, NumericalError, SceneGenerationError
from .experiments import ABLATION_AXES, run_experiment

MODES = ("simulate", "train", "eval", "ablate", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopbev",
        description="Cooperative BEV perception experiments on synthetic scenes.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", type=Path, default=None,
                       help="YAML config overriding the preset defaults")
        p.add_argument("--preset", choices=("desk", "paper-scale"), default="desk")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        if mode == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
        if mode == "ablate":
            p.add_argument("--axis", choices=(*ABLATION_AXES, "all"), default="all")
        if mode == "gradcheck":
            p.add_argument("--seeds", type=int, default=3,
                           help="number of random seeds per check")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, preset=args.preset, seed=args.seed)
        out = args.out if args.out is not None else Path("runs") / (
            f"{args.mode}-{config_hash(cfg)}")
        result = run_experiment(
            cfg, args.mode, out,
            checkpoint=getattr(args, "checkpoint", None),
            axis=getattr(args, "axis", "all"),
            gradcheck_seeds=getattr(args, "seeds", 3))
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, SceneGenerationError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    print(f"{args.mode} complete; artifacts in {out}")
    if args.mode == "eval":
        for mode, res in result.items():
            print(f"  {mode:14s} AP@0.5={res.ap_50:.4f}  AP@0.7={res.ap_70:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
