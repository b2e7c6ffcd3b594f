# Copyright 2024 The sector-ensemble authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import argparse
import json
import logging
import os
import sys

from utils.dataset import Quarter
from utils.errors import ConfigError, EmptyFile, MalformedRow, MissingColumn, ModelFormatError
from utils.pipeline import RunConfig, backtest_forward, parse_thresholds, run_pipeline, save_models
from utils.report import EvaluationReport, validate_report, write_extracts
from utils.synthetic import DEFAULT_MARGIN, SyntheticSpec, write_synthetic

logger = logging.getLogger("sector_ensemble")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONFIG = 2
INPUT_ERRORS = (EmptyFile, MissingColumn, MalformedRow, ModelFormatError, OSError, json.JSONDecodeError)

# Flag destination -> RunConfig field, for flags that map one to one.
CONFIG_FLAGS = (
    "input_path", "mode", "train_fraction", "gamma_grid", "rvm_threshold", "relief_k_neighbors",
    "relief_iterations", "seed", "output_dir", "max_trees", "forest_max_depth", "forest_min_node_size",
    "knn_members", "knn_folds", "knn_max_k", "svm_c", "cv_folds", "min_sector_size", "workers",
    "gamma_frequency_runs", "quarters", "train_quarter", "horizon_end", "committee_errors",
)


def add_run_arguments(parser):
    """ Flags shared by `train` and `backtest`; each overrides the config file """
    parser.add_argument("--config", help="JSON run configuration", default=None)
    parser.add_argument("--input", dest="input_path", help="Input CSV file", default=None)
    parser.add_argument("--mode", choices=("per_sector", "aggregated"), default=None)
    parser.add_argument("--train-fraction", type=float, default=None)
    parser.add_argument("--gamma-grid", type=float, nargs="+", default=None, help="RBF kernel widths to search")
    parser.add_argument(
        "--rvm-threshold",
        dest="rvm_overrides",
        action="append",
        default=[],
        help="RVM decision threshold, either VALUE for every sector or SECTOR=VALUE (repeatable)",
    )
    parser.add_argument("--relief-top-m", type=int, default=None)
    parser.add_argument("--relief-threshold", type=float, default=None)
    parser.add_argument("--relief-k-neighbors", type=int, default=None)
    parser.add_argument("--relief-iterations", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--max-trees", type=int, default=None)
    parser.add_argument("--forest-max-depth", type=int, default=None)
    parser.add_argument("--forest-min-node-size", type=int, default=None)
    parser.add_argument("--knn-members", type=int, default=None)
    parser.add_argument("--knn-folds", type=int, default=None)
    parser.add_argument("--knn-max-k", type=int, default=None)
    parser.add_argument("--svm-c", type=float, default=None)
    parser.add_argument("--cv-folds", type=int, default=None)
    parser.add_argument("--min-sector-size", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--gamma-frequency-runs", type=int, default=None)
    parser.add_argument("--quarters", nargs="+", default=None, help="Only use these quarters, e.g. 2009Q1")
    parser.add_argument(
        "--committee-errors",
        choices=("held_out", "training"),
        default=None,
        help="Weigh learners by out-of-sample estimates (default) or by plain training error",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sector-ensemble",
        description="Boosted committee of forest, SVM, RVM and k-NN learners for stock return classification",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        help="Log debug output",
        default=False,
        action="store_true"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Write a synthetic quarterly dataset")
    generate.add_argument("output", help="CSV file to write")
    generate.add_argument("--sectors", type=int, default=4)
    generate.add_argument("--records", type=int, default=300, help="Records per sector and quarter")
    generate.add_argument("--informative", type=int, default=5)
    generate.add_argument("--noise", type=float, default=0.0, help="Probability of flipping each label")
    generate.add_argument(
        "--margin", type=float, default=DEFAULT_MARGIN, help="Distance of every record from the labelling boundary"
    )
    generate.add_argument("--quarters", type=int, default=1)
    generate.add_argument("--start-quarter", default="2009Q1")
    generate.add_argument("--shift-quarter", default=None, help="First quarter with the labelling rule inverted")
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--with-prices", action="store_true", help="Write price columns instead of labels")

    train = commands.add_parser("train", help="Train and evaluate per sector or on the aggregate")
    add_run_arguments(train)

    backtest = commands.add_parser("backtest", help="Score models frozen on one quarter over later quarters")
    add_run_arguments(backtest)
    backtest.add_argument("--train-quarter", default=None)
    backtest.add_argument("--horizon-end", default=None)

    report = commands.add_parser("report", help="Validate a report and write its CSV extracts")
    report.add_argument("report", help="Report JSON file")
    report.add_argument("--extracts", default=None, help="Directory for the CSV extracts")
    return parser


def load_config(args) -> RunConfig:
    """ Builds the run configuration from the config file, overridden by flags """
    document = {}
    if args.config is not None:
        document = RunConfig.from_json(args.config).to_dict()
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            document[name] = value
    if args.relief_top_m is not None:
        document["relief_top_m"], document["relief_threshold"] = args.relief_top_m, None
    if args.relief_threshold is not None:
        document["relief_threshold"], document["relief_top_m"] = args.relief_threshold, None

    thresholds = dict(parse_thresholds(document.get("rvm_thresholds", {})))
    for override in args.rvm_overrides:
        if "=" in override:
            thresholds.update(parse_thresholds([override]))
        else:
            try:
                document["rvm_threshold"] = float(override)
            except ValueError:
                raise ConfigError(f"Bad RVM threshold {override!r}") from None
    document["rvm_thresholds"] = thresholds
    return RunConfig.from_dict(document)


def run_generate(args) -> int:
    try:
        spec = SyntheticSpec(
            sectors=args.sectors,
            records_per_sector=args.records,
            informative=args.informative,
            noise=args.noise,
            margin=args.margin,
            quarters=args.quarters,
            start_quarter=Quarter.parse(args.start_quarter),
            shift_quarter=Quarter.parse(args.shift_quarter) if args.shift_quarter else None,
            seed=args.seed,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    data = write_synthetic(spec, args.output, with_prices=args.with_prices)
    for sector, columns in data.planted.items():
        logger.info("Sector %d informative columns: %s", int(sector), ", ".join(columns))
    logger.info("Wrote %d records to %s", len(data.dataset), args.output)
    return EXIT_OK


def run_train(args) -> int:
    config = load_config(args)
    if not config.input_path:
        raise ConfigError("No input file given (--input or input_path)")
    report, outcomes = run_pipeline(config)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "report.json")
    report.write(path)
    save_models(outcomes, os.path.join(config.output_dir, "models"))
    for sector in report.sectors:
        if sector.trained:
            logger.info("%s: committee test error %.4f (train %.4f)%s", sector.sector_name,
                        sector.committee_test_error, sector.committee_train_error,
                        ", overfit" if sector.overfit_warning else "")
        else:
            logger.info("%s: skipped (%s)", sector.sector_name, sector.skip_reason)
    logger.info("Report written to %s", path)
    return EXIT_OK


def run_backtest(args) -> int:
    config = load_config(args)
    if not config.input_path:
        raise ConfigError("No input file given (--input or input_path)")
    if config.train_quarter is None or config.horizon_end is None:
        raise ConfigError("backtest needs --train-quarter and --horizon-end")
    series = backtest_forward(config, config.train_quarter, config.horizon_end)
    report = EvaluationReport(mode=config.mode, config=config.to_dict(), forward=series)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "backtest.json")
    report.write(path)
    for entry in series:
        if entry.skip_reason:
            logger.info("%s: skipped (%s)", entry.sector_name, entry.skip_reason)
            continue
        errors = ", ".join("absent" if e is None else f"{e:.3f}" for e in entry.errors)
        logger.info("%s: forward errors %s", entry.sector_name, errors)
    logger.info("Backtest written to %s", path)
    return EXIT_OK


def run_report(args) -> int:
    with open(args.report, encoding="utf-8") as f:
        document = json.load(f)
    problems = validate_report(document)
    if problems:
        for problem in problems:
            logger.error("%s", problem)
        return EXIT_INPUT
    report = EvaluationReport.from_dict(document)
    print(f"{'sector':<28} {'status':<8} {'committee':>9} {'naive':>7} {'majority':>8}")
    for sector in report.sectors:
        if sector.trained:
            print(f"{sector.sector_name:<28} {sector.status:<8} {sector.committee_test_error:>9.4f} "
                  f"{sector.naive_committee_test_error:>7.4f} {sector.majority_class_test_error:>8.4f}")
        else:
            print(f"{sector.sector_name:<28} {sector.status:<8}")
    directory = args.extracts or os.path.join(os.path.dirname(os.path.abspath(args.report)), "extracts")
    write_extracts(report, directory)
    return EXIT_OK


COMMANDS = {
    "generate": run_generate,
    "train": run_train,
    "backtest": run_backtest,
    "report": run_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG
    except INPUT_ERRORS as e:
        logger.error("Cannot read input: %s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
