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
"""
Per-sector training and evaluation runs and frozen-model forward backtests.

A sector run standardizes a random training split, keeps the features
Relief-F ranks highest, fits the four learners with their own model
selection, weighs them into a committee and scores everything on the
held-out records. Every random choice is seeded from the run seed and the
sector code, so parallel and serial runs agree.
"""
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from learners.forest import ForestConfig, prefix_error_curve, select_tree_count, train_forest, truncate
from learners.knn import select_k, train_committee
from learners.rvm import DEFAULT_THRESHOLD, RvmConfig, train_rvm
from learners.svm import DEFAULT_C, train_svm
from utils.committee import (
    CommitteeModel, error_rate, fit_committee, majority_class_error, naive_vote, positive_rate
)
from utils.dataset import (
    Dataset, Quarter, Sector, Standardization, as_aggregated, below_critical_mass, concatenate, load_csv,
    partition_by_sector, split_train_test, standardize
)
from utils.errors import (
    ConfigError, DegenerateFold, DegenerateSplit, InsufficientClassData, MissingQuarter,
    NumericalFailure, SingleClassTraining, TooFewRecords
)
from utils.model_types import fingerprint, save_model
from utils.modelsel import GAMMA_GRID, gamma_selection_frequency, grid_search_gamma
from utils.relief import relieff, select_features
from utils.report import EvaluationReport, ForwardPoint, ForwardSeries, LearnerReport, SectorReport

logger = logging.getLogger(__name__)

MODES = ("per_sector", "aggregated")
# held_out: forest OOB error and cross-validated SVM, RVM and k-NN errors on the training split.
# training: each learner's error on the records it was fitted to.
COMMITTEE_ERRORS = ("held_out", "training")
# Failures that skip one sector instead of stopping the run.
SECTOR_FAILURES = (
    NumericalFailure, InsufficientClassData, SingleClassTraining, DegenerateSplit, DegenerateFold,
    TooFewRecords, MissingQuarter,
)


@dataclass
class RunConfig:
    input_path: str = ""
    mode: str = "per_sector"
    train_fraction: float = 0.10
    gamma_grid: tuple = GAMMA_GRID
    rvm_threshold: float = DEFAULT_THRESHOLD
    # Sector code -> RVM threshold, overriding `rvm_threshold`.
    rvm_thresholds: dict = field(default_factory=dict)
    relief_top_m: Optional[int] = 10
    relief_threshold: Optional[float] = None
    relief_k_neighbors: int = 10
    relief_iterations: Optional[int] = None
    seed: int = 0
    output_dir: str = "results"
    max_trees: int = 200
    forest_max_depth: int = 16
    forest_min_node_size: int = 2
    knn_members: int = 100
    knn_folds: int = 10
    knn_max_k: int = 100
    svm_c: float = DEFAULT_C
    cv_folds: int = 5
    min_sector_size: int = 40
    workers: int = 1
    gamma_frequency_runs: int = 0
    quarters: Optional[tuple] = None
    overfit_train_error: float = 0.02
    overfit_test_error: float = 0.30
    train_quarter: Optional[str] = None
    horizon_end: Optional[str] = None
    # Where the committee's learner errors come from, see COMMITTEE_ERRORS.
    committee_errors: str = "held_out"

    @classmethod
    def from_dict(cls, document: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(document) - known)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
        document = dict(document)
        if "gamma_grid" in document:
            document["gamma_grid"] = tuple(document["gamma_grid"])
        if document.get("quarters") is not None:
            document["quarters"] = tuple(document["quarters"])
        if "rvm_thresholds" in document:
            document["rvm_thresholds"] = parse_thresholds(document["rvm_thresholds"])
        config = cls(**document)
        config.validate()
        return config

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                document = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read configuration {path}: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"Configuration {path} is not a JSON object")
        return cls.from_dict(document)

    def to_dict(self) -> dict:
        document = asdict(self)
        document["gamma_grid"] = list(self.gamma_grid)
        document["rvm_thresholds"] = {str(k): v for k, v in self.rvm_thresholds.items()}
        if self.quarters is not None:
            document["quarters"] = list(self.quarters)
        return document

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.committee_errors not in COMMITTEE_ERRORS:
            raise ConfigError(
                f"committee_errors must be one of {', '.join(COMMITTEE_ERRORS)}, got {self.committee_errors!r}"
            )
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not self.gamma_grid or any(not g > 0 for g in self.gamma_grid):
            raise ConfigError(f"gamma_grid must hold positive values, got {self.gamma_grid}")
        for sector, threshold in [(None, self.rvm_threshold), *self.rvm_thresholds.items()]:
            if not 0 < threshold < 1:
                raise ConfigError(f"RVM threshold for {sector or 'all sectors'} must lie in (0, 1), got {threshold}")
        if (self.relief_top_m is None) == (self.relief_threshold is None):
            raise ConfigError("Set exactly one of relief_top_m and relief_threshold")
        if self.relief_top_m is not None and self.relief_top_m < 1:
            raise ConfigError("relief_top_m must be positive")
        if self.relief_threshold is not None and not 0 <= self.relief_threshold <= 1:
            raise ConfigError("relief_threshold must lie in [0, 1]")
        for name in ("relief_k_neighbors", "max_trees", "forest_max_depth", "forest_min_node_size",
                     "knn_members", "knn_max_k", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.cv_folds < 2 or self.knn_folds < 2:
            raise ConfigError("cross-validation needs at least 2 folds")
        if self.svm_c <= 0:
            raise ConfigError("svm_c must be positive")
        if self.gamma_frequency_runs < 0 or self.min_sector_size < 0:
            raise ConfigError("gamma_frequency_runs and min_sector_size must not be negative")
        try:
            for text in (self.quarters or ()):
                Quarter.parse(text)
            for text in (self.train_quarter, self.horizon_end):
                if text is not None:
                    Quarter.parse(text)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def threshold_for(self, sector: int) -> float:
        return self.rvm_thresholds.get(int(sector), self.rvm_threshold)

    def forest_config(self) -> ForestConfig:
        return ForestConfig(max_depth=self.forest_max_depth, min_node_size=self.forest_min_node_size)


def parse_thresholds(entries) -> dict:
    """ Sector -> threshold map from a dict or from "SECTOR=VALUE" strings """
    items = entries.items() if isinstance(entries, dict) else (_split_assignment(e) for e in entries)
    thresholds = {}
    for sector, value in items:
        try:
            thresholds[int(Sector.parse(sector))] = float(value)
        except ValueError as e:
            raise ConfigError(f"Bad RVM threshold override {sector}={value}: {e}") from e
    return thresholds


def _split_assignment(text: str) -> tuple:
    sector, sep, value = str(text).partition("=")
    if not sep:
        raise ConfigError(f"Expected SECTOR=VALUE, got {text!r}")
    return sector.strip(), value.strip()


def sector_seed(seed: int, sector: int) -> int:
    return int(np.random.SeedSequence([seed, int(sector)]).generate_state(1)[0])


@dataclass
class FrozenSector:
    """ Everything needed to score new records exactly as the sector was trained """
    sector: int
    standardization: Standardization
    selected: tuple
    committee: CommitteeModel

    def prepare(self, data: Dataset) -> Dataset:
        return data.with_standardization(
            self.standardization.apply(data.features), self.standardization
        ).select_features(self.selected)

    def decide(self, data: Dataset) -> np.ndarray:
        return self.committee.decide(self.prepare(data).features)


@dataclass
class SectorOutcome:
    report: SectorReport
    frozen: Optional[FrozenSector] = None


def rvm_training_floor(folds: int, min_records: int = RvmConfig().min_records) -> int:
    """ Smallest training split whose every cross-validation complement still has `min_records` records

    With the default 10% split and 5 folds this is 10 training records, so
    sectors need about 100 records however low the critical mass is set.
    """
    folds, n = max(2, folds), min_records
    while n - math.ceil(n / folds) < min_records:
        n += 1
    return n


def _relief_neighbours(train: Dataset, requested: int) -> int:
    smallest = min(train.class_counts().values())
    usable = max(1, smallest - 1)
    if requested > usable:
        logger.warning("Clamping Relief-F neighbours from %d to %d (smallest class has %d records)",
                       requested, usable, smallest)
        return usable
    return requested


def train_sector(data: Dataset, sector: int, config: RunConfig) -> SectorOutcome:
    """ Runs the full train/evaluate protocol on one sector's records """
    name = Sector(int(sector)).canonical_name
    if below_critical_mass(data, config.min_sector_size):
        logger.warning("Skipping sector %s: %d records is below the critical mass of %d",
                       name, len(data), config.min_sector_size)
        return SectorOutcome(SectorReport.skipped(int(sector), name, "below critical mass", len(data)))
    try:
        return _train_sector(data, int(sector), name, config)
    except SECTOR_FAILURES as e:
        logger.warning("Skipping sector %s: %s: %s", name, type(e).__name__, e)
        return SectorOutcome(SectorReport.skipped(int(sector), name, f"{type(e).__name__}: {e}", len(data)))


def _train_sector(data: Dataset, sector: int, name: str, config: RunConfig) -> SectorOutcome:
    started = time.perf_counter()
    seed = sector_seed(config.seed, sector)
    train, test = split_train_test(data, config.train_fraction, seed)
    floor = rvm_training_floor(min(config.cv_folds, len(train)))
    if len(train) < floor:
        raise TooFewRecords(f"training split of {len(train)} records is below the RVM floor of {floor}")
    if not train.has_both_classes():
        raise InsufficientClassData(f"training split holds one class: {train.class_counts()}")
    train, test = standardize(train, test)
    standardization = train.standardization

    weights = relieff(train, _relief_neighbours(train, config.relief_k_neighbors), config.relief_iterations, seed)
    if config.relief_top_m is not None:
        selected = select_features(weights, top_m=min(config.relief_top_m, train.dimension))
    else:
        selected = select_features(weights, threshold=config.relief_threshold)
    train, test = train.select_features(selected), test.select_features(selected)
    logger.info("Sector %s: %d train / %d test records, %d features kept", name, len(train), len(test), len(selected))

    forest_config = config.forest_config()
    full_forest = train_forest(train, config.max_trees, seed, forest_config)
    tree_count = select_tree_count(
        full_forest.oob_curve, forest_config.min_trees, forest_config.flat_window, forest_config.flat_tolerance,
        forest_config.tree_cap,
    )
    forest = truncate(full_forest, tree_count)

    folds = min(config.cv_folds, len(train))
    threshold = config.threshold_for(sector)

    def svm_trainer(part, gamma):
        return train_svm(part, gamma, config.svm_c)

    def rvm_trainer(part, gamma):
        return train_rvm(part, gamma, threshold)

    svm_grid = grid_search_gamma(svm_trainer, train, config.gamma_grid, folds, seed)
    svm = svm_trainer(train, svm_grid.chosen)
    rvm_grid = grid_search_gamma(rvm_trainer, train, config.gamma_grid, folds, seed)
    rvm = rvm_trainer(train, rvm_grid.chosen)

    selection = select_k(train, config.knn_max_k, min(config.knn_folds, len(train)), seed)
    knn = train_committee(train, config.knn_members, selection.k_star, seed)

    models = [forest, svm, rvm, knn]
    if config.committee_errors == "held_out":
        estimates = (
            float(full_forest.oob_curve[tree_count - 1]), svm_grid.best_error, rvm_grid.best_error,
            float(selection.cv_errors[selection.k_star - 1]),
        )
        committee = fit_committee(models, train, errors=estimates)
    else:
        committee = fit_committee(models, train)

    learners = []
    for learner, epsilon, alpha, gamma in zip(
            committee.learners, committee.training_errors, committee.alphas,
            (None, svm_grid.chosen, rvm_grid.chosen, None)):
        test_predictions = learner.decide(test.features)
        learners.append(LearnerReport(
            name=learner.name,
            train_error=error_rate(learner.decide(train.features), train.labels),
            test_error=error_rate(test_predictions, test.labels),
            epsilon=epsilon,
            alpha=alpha,
            positive_rate=positive_rate(test_predictions),
            gamma=gamma,
        ))

    committee_train_error = error_rate(committee.decide(train.features), train.labels)
    committee_test_error = error_rate(committee.decide(test.features), test.labels)
    overfit = committee_train_error < config.overfit_train_error and committee_test_error > config.overfit_test_error
    if overfit:
        logger.warning("Sector %s looks overfit: committee train error %.4f, test error %.4f",
                       name, committee_train_error, committee_test_error)

    frequency = {}
    if config.gamma_frequency_runs > 0:
        seeds = range(seed, seed + config.gamma_frequency_runs)
        frequency = {
            "svm": gamma_selection_frequency(svm_trainer, train, config.gamma_grid, folds, seeds),
            "rvm": gamma_selection_frequency(rvm_trainer, train, config.gamma_grid, folds, seeds),
        }

    report = SectorReport(
        sector=sector,
        sector_name=name,
        status="trained",
        n_records=len(data),
        n_train=len(train),
        n_test=len(test),
        selected_features=list(train.schema),
        relief_weights=[
            {"feature": feature, "raw_weight": float(raw), "normalized_weight": float(normalized)}
            for feature, raw, normalized in zip(weights.schema, weights.raw, weights.normalized)
        ],
        learners=learners,
        committee_train_error=committee_train_error,
        committee_test_error=committee_test_error,
        naive_committee_test_error=error_rate(naive_vote(committee.learners, test.features), test.labels),
        majority_class_test_error=majority_class_error(train.labels, test.labels),
        committee_mean_margin=float(np.mean(committee.margin(test.features))),
        rvm_mean_probability=float(np.mean(rvm.probability(test.features))),
        rvm_threshold=threshold,
        svm_gamma_grid=_grid_document(svm_grid),
        rvm_gamma_grid=_grid_document(rvm_grid),
        gamma_frequency=frequency,
        k_star=selection.k_star,
        k_curve=[float(e) for e in selection.cv_errors],
        tree_count=tree_count,
        oob_curve=[float(e) for e in full_forest.oob_curve],
        test_error_curve=[float(e) for e in prefix_error_curve(full_forest, test)],
        overfit_warning=overfit,
        model_fingerprint=fingerprint(committee),
    )
    report.wall_clock_seconds = time.perf_counter() - started
    frozen = FrozenSector(sector, standardization, tuple(selected), committee)
    return SectorOutcome(report, frozen)


def _grid_document(result) -> dict:
    return {"grid": list(result.grid), "mean_errors": list(result.mean_errors), "chosen": result.chosen,
            "skipped_folds": list(result.skipped_folds)}


def _filter_quarters(data: Dataset, quarters) -> Dataset:
    if not quarters:
        return data
    wanted = [Quarter.parse(q) for q in quarters]
    present = [data.by_quarter(q) for q in wanted if len(data.by_quarter(q))]
    if not present:
        raise MissingQuarter(f"None of the quarters {', '.join(map(str, wanted))} are in the data")
    return concatenate(present)


def _partitions(data: Dataset, mode: str) -> dict:
    if mode == "aggregated":
        return {Sector.AGGREGATED: as_aggregated(data)}
    return partition_by_sector(data)


def train_sectors(data: Dataset, config: RunConfig) -> list:
    """ Sector outcomes in sector-code order, computed by up to `config.workers` processes """
    parts = _partitions(data, config.mode)
    if config.workers == 1:
        return [train_sector(part, sector, config) for sector, part in parts.items()]
    return Parallel(n_jobs=config.workers)(
        delayed(train_sector)(part, sector, config) for sector, part in parts.items()
    )


def run_pipeline(config: RunConfig, data: Optional[Dataset] = None) -> tuple:
    """ Trains and evaluates every sector (or the aggregate) named by the configuration

    Returns the report and the per-sector outcomes holding the fitted
    committees. Data is read from `config.input_path` unless given.
    Unreadable input raises; sector-level failures become skipped entries.
    """
    config.validate()
    started = time.perf_counter()
    if data is None:
        data = load_csv(config.input_path)
    data = _filter_quarters(data, config.quarters)
    outcomes = train_sectors(data, config)
    report = EvaluationReport(
        mode=config.mode,
        config=config.to_dict(),
        sectors=[o.report for o in outcomes],
        total_seconds=time.perf_counter() - started,
    )
    trained = len(report.trained_sectors)
    logger.info("Trained %d of %d sectors in %.2f s", trained, len(outcomes), report.total_seconds)
    return report, outcomes


def save_models(outcomes, directory) -> list:
    """ Writes each trained sector's committee as a model document """
    os.makedirs(directory, exist_ok=True)
    paths = []
    for outcome in outcomes:
        if outcome.frozen is not None:
            path = os.path.join(directory, f"sector_{outcome.frozen.sector}.json")
            save_model(outcome.frozen.committee, path)
            paths.append(path)
    return paths


def _forward_series(data: Dataset, sector: int, config: RunConfig, train_quarter: Quarter,
                    horizon_end: Quarter) -> ForwardSeries:
    name = Sector(int(sector)).canonical_name
    series = ForwardSeries(int(sector), name, str(train_quarter), str(horizon_end))
    training = data.by_quarter(train_quarter)
    if len(training) == 0:
        series.skip_reason = f"MissingQuarter: no records for {train_quarter}"
        logger.warning("Sector %s has no records for training quarter %s", name, train_quarter)
        return series
    outcome = train_sector(training, sector, config)
    if outcome.frozen is None:
        series.skip_reason = outcome.report.skip_reason
        return series

    frozen = outcome.frozen
    series.fingerprint_before = fingerprint(frozen.committee)
    quarter = train_quarter.next()
    while quarter <= horizon_end:
        records = data.by_quarter(quarter)
        try:
            if len(records) == 0:
                raise MissingQuarter(f"no records for {quarter}")
            error = error_rate(frozen.decide(records), records.labels)
            series.points.append(ForwardPoint(quarter.year, quarter.index, "ok", error, len(records)))
        except MissingQuarter as e:
            logger.warning("Sector %s: %s, marking it absent", name, e)
            series.points.append(ForwardPoint(quarter.year, quarter.index, "missing"))
        quarter = quarter.next()
    series.fingerprint_after = fingerprint(frozen.committee)
    return series


def backtest_forward(config: RunConfig, train_quarter, horizon_end, data: Optional[Dataset] = None) -> list:
    """ Fits each sector once on `train_quarter` and scores the frozen committee on every later quarter

    Nothing learned on the training quarter (features, weights, kernel
    widths, k, thresholds, committee weights) is refitted over the horizon.
    """
    config.validate()
    train_quarter = train_quarter if isinstance(train_quarter, Quarter) else Quarter.parse(train_quarter)
    horizon_end = horizon_end if isinstance(horizon_end, Quarter) else Quarter.parse(horizon_end)
    if horizon_end <= train_quarter:
        raise ConfigError(f"Horizon end {horizon_end} must come after training quarter {train_quarter}")
    if data is None:
        data = load_csv(config.input_path)
    parts = _partitions(data, config.mode)
    if config.workers == 1:
        return [_forward_series(part, sector, config, train_quarter, horizon_end) for sector, part in parts.items()]
    return Parallel(n_jobs=config.workers)(
        delayed(_forward_series)(part, sector, config, train_quarter, horizon_end) for sector, part in parts.items()
    )


__all__ = [
    "RunConfig", "FrozenSector", "SectorOutcome", "parse_thresholds", "sector_seed",
    "train_sector", "train_sectors", "run_pipeline", "save_models", "backtest_forward", "rvm_training_floor",
]
