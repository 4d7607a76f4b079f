"""Command-line entry point.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import (
    ABLATIONS,
    data_dir,
    ensure_data,
    gen_data,
    run_ablation,
    run_finetune,
    run_full,
    run_pretrain,
    run_units,
    RunDir,
    evaluate_ckpt,
)
from .scene import load_manifest, load_split
from .units import Strategy

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--strategy", choices=["sbss", "dbss", "dbds"], help="override the strategy")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors")
    return common


def build_parser() -> _Parser:
    common = _common_flags()
    parser = _Parser(prog="unitslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate all dataset splits")
    sub.add_parser("run", parents=[common], help="full three-stage pipeline per seed")
    stage = sub.add_parser("stage", parents=[common], help="run a single pipeline stage")
    stage.add_argument("which", choices=["pretrain", "units", "finetune"])
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    ev.add_argument("--ckpt", required=True, metavar="PATH")
    ev.add_argument(
        "--split", choices=["synth_pool", "real_train", "real_test"], default="real_test"
    )
    ab = sub.add_parser("ablate", parents=[common], help="run a toy ablation over all seeds")
    ab.add_argument("which", choices=list(ABLATIONS))
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.strategy:
        cfg = replace(cfg, units=replace(cfg.units, strategy=args.strategy))
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def cli_main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve_config(args)
        return _dispatch(args, cfg)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        sys.stderr.write(f"error: {e}\n")
        logger.debug("unhandled failure", exc_info=True)
        return 2


def _dispatch(args, cfg: ExperimentConfig) -> int:
    if args.command == "gen-data":
        gen_data(cfg)
        return 0
    if args.command == "run":
        for seed in cfg.seeds:
            summary = run_full(cfg, seed)
            print(
                f"run-{seed}: pretrain F={summary['pretrain']:.4f} "
                f"units F={summary['units']:.4f} finetune F={summary['finetune']:.4f}"
            )
        return 0
    if args.command == "stage":
        strategy = Strategy(cfg.units.strategy)
        for seed in cfg.seeds:
            data = ensure_data(cfg)
            rd = RunDir(cfg, seed)
            if args.which == "pretrain":
                path = run_pretrain(cfg, seed, rd, data)
            elif args.which == "units":
                path = run_units(cfg, seed, rd, data, strategy)["units.ckpt"]
            else:
                init = run_units(cfg, seed, rd, data, strategy)["units.ckpt"]
                path = run_finetune(cfg, seed, rd, data, strategy.value, init)
            print(f"run-{seed}: {args.which} checkpoint at {path}")
        return 0
    if args.command == "eval":
        data = ensure_data(cfg)
        samples = {
            "synth_pool": data.synth_pool,
            "real_train": data.real_train,
            "real_test": data.real_test,
        }[args.split]
        report = evaluate_ckpt(cfg, args.ckpt, samples)
        print(report.csv_header())
        print(report.csv_row("eval", "eval", cfg.units.strategy, args.split))
        return 0
    if args.command == "ablate":
        path = run_ablation(cfg, args.which)
        print(f"ablation written to {path}")
        return 0
    if args.command == "show-config":
        print(cfg.to_json())
        return 0
    raise AssertionError(f"unhandled command {args.command}")


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
