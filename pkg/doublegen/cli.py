"""``doublegen`` command line: simulate | train | generate | evaluate | experiment | report."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from doublegen import pipeline
from doublegen.config import ExperimentConfig, Scenario, load_config, write_resolved
from doublegen.constants import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR
from doublegen.exceptions import ConfigError, DataError, DoubleGenError
from doublegen.risk import Method

logger = logging.getLogger("doublegen.cli")


def _common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="experiment JSON config (defaults apply when omitted)")
    parser.add_argument("--out", type=Path, required=out_required, help="output directory")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--threads", type=int, help="parallel grid workers")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doublegen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="write observational and counterfactual CSVs per seed")
    _common(simulate)

    train = sub.add_parser("train", help="fit nuisances and train one method")
    _common(train)
    train.add_argument("--data", type=Path, help="directory with simulated CSVs (defaults to --out)")
    train.add_argument("--method", choices=[m.value for m in Method], default=Method.DOUBLEGEN.value)
    train.add_argument("--scenario", choices=[s.value for s in Scenario], default=Scenario.BOTH_RIGHT.value)

    generate = sub.add_parser("generate", help="sample from a trained model")
    generate.add_argument("--model", type=Path, required=True)
    generate.add_argument("--count", type=int, default=1000)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--out", type=Path, required=True, help="samples CSV")
    generate.add_argument("--verbose", action="store_true")

    evaluate = sub.add_parser("evaluate", help="divergences of a samples CSV from the counterfactual law")
    _common(evaluate)
    evaluate.add_argument("--samples", type=Path, required=True)
    evaluate.add_argument("--model", type=Path, help="model JSON for exact token divergences")
    evaluate.add_argument("--reference", type=Path, help="reference samples CSV")
    evaluate.add_argument("--data", type=Path, help="observational CSV for a weighted reference")

    experiment = sub.add_parser("experiment", help="run the scenario x method x seed grid")
    _common(experiment)

    report = sub.add_parser("report", help="re-render the summary table from a metrics CSV")
    report.add_argument("--metrics", type=Path, required=True)
    report.add_argument("--out", type=Path, required=True)
    report.add_argument("--verbose", action="store_true")
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config).with_overrides(seed=args.seed, threads=args.threads)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        write_resolved(config, args.out)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out}: {exc}") from exc
    return config


def run(args: argparse.Namespace) -> None:
    if args.command == "simulate":
        pipeline.simulate(_load(args), args.out)
    elif args.command == "train":
        config = _load(args)
        pipeline.train_files(config, args.data or args.out, args.out, Method(args.method), Scenario(args.scenario))
    elif args.command == "generate":
        pipeline.generate_file(args.model, args.count, args.seed, args.out)
    elif args.command == "evaluate":
        config = _load(args)
        reports = pipeline.evaluate_file(
            config, args.samples, config.seeds[0], args.out, args.model, args.reference, args.data
        )
        for report in reports:
            logger.info("%s = %.6g", report.metric, report.value)
    elif args.command == "experiment":
        _, summary = pipeline.experiment(_load(args), args.out)
        logger.info("summary:\n%s", summary.to_string(index=False))
    elif args.command == "report":
        summary = pipeline.report(args.metrics, args.out)
        print(summary.to_string(index=False))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        run(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG_ERROR
    except DoubleGenError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
