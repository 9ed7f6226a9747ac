"""otdoa-uncertainty -- OTDoA positioning with GP/RF position-uncertainty assessment.

Usage:
    otdoa-uncertainty simulate [options]
    otdoa-uncertainty train [options]
    otdoa-uncertainty evaluate [options]
    otdoa-uncertainty report [options]
    otdoa-uncertainty --help

Commands:
    simulate                Drop UEs, synthesize ToAs and write the train/test CSVs.
    train                   Fit the per-BS GPs and the random forest on the train split.
    evaluate                Estimate positions and uncertainties for the test split, write the report CSVs.
    report                  Pretty-print summary.csv.

Options:
    --config=<path>         TOML run configuration (see README.md). Built-in defaults when omitted.
    --seed=<int>            Root seed, overrides scenario.rng_seed.
    --num-samples=<n>       GP distance samples per UE, overrides uncertainty.num_samples.
    --max-iter=<n>          Solver iteration cap, overrides solver.max_iterations.
    --pos-tol=<m>           Solver step tolerance in metres, overrides solver.position_tolerance_m.
    --workers=<n>           Worker threads, overrides runtime.workers.
    --rf-cv                 Select forest size and depth by 5-fold cross validation.
    --log=<systemd|stderr>  Log to systemd journal or stderr [default: stderr]
    --log-level=<level>     Log level (debug, info, warning, error) [default: info]
    --help                  Show this screen
"""

import docopt
import logging
import sys
from pathlib import Path

from . import config as run_config
from .errors import PositioningError
from .pipeline import Pipeline

logger = logging.getLogger(__name__)

_handler = None


def as_number(value, kind=int):
    if value is None:
        return None
    try:
        return kind(value)
    except ValueError:
        raise docopt.DocoptExit(f"Invalid number: {value}") from None


def init_logging(log_type, log_level):
    global _handler
    root_logger = logging.getLogger()

    if log_type == "systemd":
        try:
            import systemd.journal

            handler = systemd.journal.JournalHandler()
        except ImportError:
            raise ImportError("systemd logging requested, but systemd.journal module not found (install the 'systemd' extra)")
    elif log_type == "stderr":
        handler = logging.StreamHandler(sys.stderr)
        formatter = logging.Formatter(fmt="%(asctime)s - %(levelname)8s - %(name)s - %(message)s")
        handler.setFormatter(formatter)
    else:
        raise docopt.DocoptExit(f"Invalid log type: {log_type}")

    match log_level.lower():
        case "debug":
            log_level = logging.DEBUG
        case "info":
            log_level = logging.INFO
        case "warning":
            log_level = logging.WARNING
        case "error":
            log_level = logging.ERROR
        case _:
            raise docopt.DocoptExit(f"Invalid log level: {log_level}")

    if _handler is not None:
        root_logger.removeHandler(_handler)
    _handler = handler
    root_logger.addHandler(handler)
    root_logger.setLevel(log_level)


def load(args):
    path = Path(args["--config"]) if args["--config"] else None
    return run_config.with_overrides(
        run_config.load_config(path),
        seed=as_number(args["--seed"]),
        num_samples=as_number(args["--num-samples"]),
        max_iterations=as_number(args["--max-iter"]),
        position_tolerance=as_number(args["--pos-tol"], float),
        workers=as_number(args["--workers"]),
        cross_validate=args["--rf-cv"],
    )


def print_table(rows, columns):
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in columns]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(r[c].ljust(w) for c, w in zip(columns, widths)))


def cmd_simulate(config):
    train, test = Pipeline(config).simulate()
    print(f"train: {len(train)} rows -> {config.paths.train_csv}")
    print(f"test: {len(test)} rows -> {config.paths.test_csv}")


def cmd_train(config):
    gp_models, forest = Pipeline(config).train()
    print(f"gp: {len(gp_models)} models -> {config.paths.gp_models}")
    print(f"rf: {len(forest.trees)} trees -> {config.paths.rf_model}")


def cmd_evaluate(config):
    Pipeline(config).evaluate()
    cmd_report(config)


def cmd_report(config):
    rows = Pipeline(config).report()
    formatted = [
        {
            "method": r["method"],
            "correlation": f"{float(r['correlation']):.4f}",
            "median_error_m": f"{float(r['median_error_m']):.3f}",
            "p90_error_m": f"{float(r['p90_error_m']):.3f}",
        }
        for r in rows
    ]
    print_table(formatted, ["method", "correlation", "median_error_m", "p90_error_m"])


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None):
    args = docopt.docopt(__doc__, argv=argv, version="otdoa-uncertainty")

    init_logging(args["--log"], args["--log-level"])

    command = next(name for name in COMMANDS if args[name])
    try:
        COMMANDS[command](load(args))
    except (PositioningError, OSError) as e:
        logger.error(f"{command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
