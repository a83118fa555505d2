import argparse
import logging
import os
import sys
import time

from config.settings import settings
from src import experiment
from src.errors import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Setup Logging
os.makedirs(os.path.dirname(settings.app.log_file) or ".", exist_ok=True)
logging.basicConfig(
    level=settings.app.log_level,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(settings.app.log_file),
        logging.StreamHandler(sys.stdout)
    ]
)
logger = logging.getLogger("QEBA_CLI")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Hard-label subspace boundary attack toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="Directory for result files")
    common.add_argument("--seed", type=int, help="Override the root seed")
    common.add_argument("--max-queries", type=int, help="Override the query budget")

    verbs = parser.add_subparsers(dest="verb", required=True)
    attack = verbs.add_parser("attack", parents=[common], help="Run repeated attacks from one config")
    attack.add_argument("config")
    compare = verbs.add_parser("compare", parents=[common], help="Paired comparison of several configs")
    compare.add_argument("configs", nargs="+")
    theory = verbs.add_parser("theory", parents=[common], help="Check the expected-cosine bounds")
    theory.add_argument("config")
    return parser


def _overrides(args: argparse.Namespace, with_budget: bool = True) -> dict:
    values = {"seed": args.seed}
    if with_budget:
        values["max_queries"] = args.max_queries
    return {k: v for k, v in values.items() if v is not None}


def run(args: argparse.Namespace) -> None:
    if args.verb == "attack":
        config, digest = experiment.load_experiment_config(args.config, _overrides(args))
        result = experiment.run_experiment(config, digest, args.out_dir)
        finals = result.final_mse()
        logger.info(f"Final MSE per seed: {finals}")
    elif args.verb == "compare":
        loaded = [experiment.load_experiment_config(path, _overrides(args)) for path in args.configs]
        comparison = experiment.compare_methods(loaded, args.out_dir)
        logger.info(f"Win fractions:\n{comparison.wins.to_string(index=False)}")
    else:
        if args.max_queries is not None:
            logger.warning("--max-queries has no effect on theory runs")
        config, digest = experiment.load_theory_config(args.config, _overrides(args, with_budget=False))
        frame = experiment.validate_theory(config, digest, args.out_dir)
        logger.info(f"Theory grid: {len(frame)} rows")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start_time = time.time()
    logger.info(f"Starting '{args.verb}'")
    try:
        run(args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"'{args.verb}' failed: {e}", exc_info=True)
        return EXIT_RUNTIME
    duration = round(time.time() - start_time, 2)
    logger.info(f"'{args.verb}' COMPLETED SUCCESSFULLY in {duration}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
