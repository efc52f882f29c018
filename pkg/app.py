import argparse
import json
import sys

from modules.risk_inference import KsMode
from processing_engine import ProcessingEngine
from utils.errors import HashAllocError
from utils.logger import logger


class _ArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so main() can return the usage exit code."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser():
    parser = _ArgumentParser(prog="hashalloc", description="Miner hash allocation across chains sharing a proof-of-work.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    fit = sub.add_parser("fit", help="fit lookback and risk per miner")
    fit.add_argument("--prices", required=True)
    fit.add_argument("--difficulty")
    fit.add_argument("--blocks", required=True)
    fit.add_argument("--miner", nargs="+", required=True, dest="miners")
    fit.add_argument("--cooldown-hours", type=int)
    fit.add_argument("--ks-mode", choices=[m.value for m in KsMode], default=KsMode.DISTRIBUTION.value)
    fit.add_argument("--chains")
    fit.add_argument("--workers", type=int)
    fit.add_argument("--out", required=True)

    allocate = sub.add_parser("allocate", help="hourly economic allocation and baselines")
    allocate.add_argument("--prices", required=True)
    allocate.add_argument("--difficulty")
    allocate.add_argument("--params", required=True)
    weights = allocate.add_mutually_exclusive_group()
    weights.add_argument("--hash-weights")
    weights.add_argument("--blocks")
    allocate.add_argument("--cooldown-hours", type=int)
    allocate.add_argument("--chains")
    allocate.add_argument("--gnuplot-script")
    allocate.add_argument("--out", required=True)

    predict = sub.add_parser("predict-ibt", help="predicted inter-block-time change")
    predict.add_argument("--allocations", required=True)
    predict.add_argument("--target", type=float, default=600.0)
    predict.add_argument("--period-hours", type=int, default=6)
    predict.add_argument("--rolling-days", type=int, default=7)
    predict.add_argument("--actual")
    predict.add_argument("--gnuplot-script")
    predict.add_argument("--out", required=True)

    shock = sub.add_parser("shock", help="Monte Carlo price-shock experiment")
    shock.add_argument("--multiplier", type=float)
    shock.add_argument("--trials", type=int)
    shock.add_argument("--seed", type=int, required=True)
    shock.add_argument("--config")
    shock.add_argument("--workers", type=int)
    shock.add_argument("--trace-dir")
    shock.add_argument("--gnuplot-script")
    shock.add_argument("--out", required=True)
    return parser


def _command_kwargs(args):
    if args.command == "fit":
        return dict(
            prices_path=args.prices, blocks_path=args.blocks, miners=args.miners, out_path=args.out,
            difficulty_path=args.difficulty, cooldown_hours=args.cooldown_hours, ks_mode=args.ks_mode,
        )
    if args.command == "allocate":
        return dict(
            prices_path=args.prices, params_path=args.params, out_path=args.out,
            difficulty_path=args.difficulty, hash_weights_path=args.hash_weights, blocks_path=args.blocks,
            cooldown_hours=args.cooldown_hours, gnuplot_path=args.gnuplot_script,
        )
    if args.command == "predict-ibt":
        return dict(
            allocations_path=args.allocations, out_path=args.out, target=args.target,
            period_hours=args.period_hours, rolling_days=args.rolling_days,
            actual_path=args.actual, gnuplot_path=args.gnuplot_script,
        )
    return dict(
        out_path=args.out, seed=args.seed, config_path=args.config, multiplier=args.multiplier,
        trials=args.trials, trace_dir=args.trace_dir, gnuplot_path=args.gnuplot_script,
    )


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 2

    try:
        engine = ProcessingEngine(chains_path=getattr(args, "chains", None), workers=getattr(args, "workers", None))
    except HashAllocError as e:
        logger.error(f"Could not set up {args.command}: {e}")
        print(str(e), file=sys.stderr)
        return e.exit_code

    code, result = engine.execute(args.command, **_command_kwargs(args))
    if code != 0:
        print(result, file=sys.stderr)
        return code

    if args.command == "predict-ibt":
        _, metrics = result
        if metrics is not None:
            print(json.dumps(metrics))
    elif args.command == "fit":
        print(json.dumps([p.to_json() for p in result]))
    print(f"Wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
