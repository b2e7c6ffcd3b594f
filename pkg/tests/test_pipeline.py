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

import json
import math
import os

import numpy as np

from utils.dataset import Dataset, Quarter, Sector, concatenate
from utils.errors import ConfigError, MissingQuarter
from utils.model_types import fingerprint, load_model
from utils.pipeline import (
    RunConfig, backtest_forward, parse_thresholds, run_pipeline, rvm_training_floor, save_models, sector_seed,
    train_sector,
)
from utils.report import LEARNER_ORDER, validate_report
from utils.synthetic import SyntheticSpec, generate_synthetic
from utils.test_suite import EnsembleTestCase


def quick_config(**overrides) -> RunConfig:
    """ A run configuration small enough for unit tests """
    settings = dict(
        train_fraction=0.3, gamma_grid=(1.0, 2.0), max_trees=20, knn_members=5, knn_max_k=10, knn_folds=5,
        cv_folds=3, relief_top_m=5,
    )
    settings.update(overrides)
    config = RunConfig(**settings)
    config.validate()
    return config


def synthetic(**kwargs) -> Dataset:
    settings = dict(sectors=4, records_per_sector=120, informative=3, noise=0.3, seed=0)
    settings.update(kwargs)
    return generate_synthetic(SyntheticSpec(**settings)).dataset


def noise_sector(n=200, d=5, seed=0, sector=Sector.ENERGY) -> Dataset:
    """ Features with no relation at all to the labels """
    rng = np.random.default_rng(seed)
    return Dataset.from_arrays(rng.normal(size=(n, d)), np.where(rng.random(n) < 0.5, 1, -1), sector=sector)


class RunPipelineTest(EnsembleTestCase):
    """ `run_pipeline` - per-sector and aggregated runs """

    @classmethod
    def setUpClass(cls):
        cls.data = synthetic()
        cls.report, cls.outcomes = run_pipeline(quick_config(), cls.data)

    def test_four_sectors(self):
        """ Four synthetic sectors give four trained entries with every learner """
        self.assertEqual([s.sector for s in self.report.sectors], [10, 15, 20, 25])
        for sector in self.report.sectors:
            self.assertTrue(sector.trained, sector.skip_reason)
            self.assertEqual(tuple(entry.name for entry in sector.learners), LEARNER_ORDER)
            self.assertErrorRate(sector.committee_test_error)
            self.assertErrorRate(sector.committee_train_error)
            self.assertEqual(sector.n_train, 36)
            self.assertEqual(sector.n_test, 84)
            self.assertEqual(len(sector.selected_features), 5)
            self.assertEqual(len(sector.relief_weights), 30)
            self.assertEqual(len(sector.oob_curve), 20)

    def test_report_is_valid(self):
        """ The report document passes validation and records the configuration """
        document = self.report.to_dict()
        self.assertEqual(validate_report(json.loads(json.dumps(document))), [])
        self.assertEqual(document["config"]["gamma_grid"], [1.0, 2.0])

    def test_gammas_come_from_the_grid(self):
        """ The SVM and RVM kernel widths are grid values; the others have none """
        for sector in self.report.sectors:
            gammas = [entry.gamma for entry in sector.learners]
            self.assertIsNone(gammas[0])
            self.assertIsNone(gammas[3])
            self.assertIn(gammas[1], (1.0, 2.0))
            self.assertIn(gammas[2], (1.0, 2.0))
            self.assertEqual(sector.svm_gamma_grid["chosen"], gammas[1])

    def test_committee_weights_match_recorded_errors(self):
        """ Each recorded weight is the log-odds of the recorded error """
        for sector in self.report.sectors:
            for entry in sector.learners:
                if 0 < entry.epsilon < 1:
                    self.assertAlmostEqual(entry.alpha, np.log((1 - entry.epsilon) / entry.epsilon))

    def test_weights_use_held_out_errors(self):
        """ By default the weights come from the out-of-bag and cross-validated errors, not the training fit """
        for sector in self.report.sectors:
            forest, svm, rvm, knn = sector.learners
            self.assertEqual(forest.epsilon, sector.oob_curve[sector.tree_count - 1])
            self.assertEqual(svm.epsilon, min(sector.svm_gamma_grid["mean_cv_error"]))
            self.assertEqual(rvm.epsilon, min(sector.rvm_gamma_grid["mean_cv_error"]))
            self.assertEqual(knn.epsilon, sector.k_curve[sector.k_star - 1])

    def test_training_errors_option(self):
        """ With committee_errors=training each weight comes from the learner's own training error """
        report, _ = run_pipeline(quick_config(committee_errors="training"), self.data)
        for sector in report.sectors:
            for entry in sector.learners:
                self.assertEqual(entry.epsilon, entry.train_error)

    def test_fingerprint_matches_saved_model(self):
        """ Saved committees load back with the fingerprint the report records """
        paths = save_models(self.outcomes, self.make_workdir())
        self.assertEqual(len(paths), 4)
        for path, sector in zip(paths, self.report.sectors):
            self.assertTrue(path.endswith(f"sector_{sector.sector}.json"))
            self.assertEqual(fingerprint(load_model(path)), sector.model_fingerprint)

    def test_frozen_sector_scores_raw_records(self):
        """ A frozen sector standardizes and selects features before deciding """
        outcome = self.outcomes[0]
        records = self.data.subset(np.flatnonzero(self.data.sectors == outcome.frozen.sector))
        prepared = outcome.frozen.prepare(records)
        self.assertEqual(list(prepared.schema), self.report.sectors[0].selected_features)
        np.testing.assert_array_equal(
            outcome.frozen.decide(records), outcome.frozen.committee.decide(prepared.features)
        )

    def test_deterministic_and_parallel(self):
        """ Reruns, serial or parallel, produce the same committees """
        again, _ = run_pipeline(quick_config(workers=2), self.data)
        self.assertEqual(
            [s.model_fingerprint for s in again.sectors],
            [s.model_fingerprint for s in self.report.sectors],
        )


class SectorSkipTest(EnsembleTestCase):
    """ `train_sector` - sectors that cannot be trained are skipped """

    def test_below_critical_mass(self):
        """ A sector with fewer records than the minimum is skipped and the rest still run """
        big = synthetic(sectors=1)
        small = Dataset.from_arrays(np.ones((20, 30)), [1, -1] * 10, sector=Sector.MATERIALS, schema=big.schema)
        report, outcomes = run_pipeline(quick_config(), concatenate([big, small]))
        self.assertTrue(report.sector(10).trained)
        skipped = report.sector(15)
        self.assertEqual(skipped.status, "skipped")
        self.assertEqual(skipped.skip_reason, "below critical mass")
        self.assertEqual(skipped.n_records, 20)
        self.assertIsNone(outcomes[1].frozen)
        self.assertEqual(validate_report(report.to_dict()), [])

    def test_single_class_sector(self):
        """ A sector whose training split holds one class is skipped with the reason """
        data = Dataset.from_arrays(np.random.default_rng(0).normal(size=(60, 4)), [-1] * 60)
        outcome = train_sector(data, Sector.ENERGY, quick_config(relief_top_m=2))
        self.assertFalse(outcome.report.trained)
        self.assertIn("InsufficientClassData", outcome.report.skip_reason)

    def test_below_rvm_floor(self):
        """ A sector above the critical mass whose 10% split is too small for the RVM folds is skipped """
        config = quick_config(train_fraction=0.1, cv_folds=5, min_sector_size=20)
        outcome = train_sector(noise_sector(n=60), Sector.ENERGY, config)
        self.assertFalse(outcome.report.trained)
        self.assertIn("TooFewRecords", outcome.report.skip_reason)
        self.assertIn("RVM floor of 10", outcome.report.skip_reason)

    def test_rvm_training_floor(self):
        """ The floor keeps every cross-validation complement at eight records or more """
        self.assertEqual(rvm_training_floor(5), 10)
        self.assertEqual(rvm_training_floor(3), 12)
        self.assertEqual(rvm_training_floor(10), 9)
        for folds in range(2, 12):
            floor = rvm_training_floor(folds)
            self.assertGreaterEqual(floor - math.ceil(floor / folds), 8)
            self.assertLess(floor - 1 - math.ceil((floor - 1) / folds), 8)


class OverfitWarningTest(EnsembleTestCase):
    """ The overfit flag on memorising committees """

    def test_random_labels_are_flagged(self):
        """ Labels unrelated to the features give a low train error and a high test error """
        config = quick_config(
            train_fraction=0.5, overfit_train_error=0.2, max_trees=40, committee_errors="training"
        )
        outcome = train_sector(noise_sector(), Sector.ENERGY, config)
        report = outcome.report
        self.assertTrue(report.trained, report.skip_reason)
        self.assertGreater(report.committee_test_error, 0.30)
        self.assertTrue(report.overfit_warning)

    def test_learnable_data_is_not_flagged(self):
        """ A sector learned well carries no flag """
        data = synthetic(sectors=1, records_per_sector=300, informative=1, noise=0.0, margin=1.5)
        report, _ = run_pipeline(quick_config(), data)
        self.assertFalse(report.sectors[0].overfit_warning)


class AggregatedModeTest(EnsembleTestCase):
    """ `run_pipeline` in aggregated mode """

    def test_single_entry(self):
        """ Every record goes into one pseudo-sector """
        data = synthetic(sectors=2, records_per_sector=60)
        report, outcomes = run_pipeline(quick_config(mode="aggregated"), data)
        self.assertEqual(len(report.sectors), 1)
        self.assertEqual(report.sectors[0].sector, int(Sector.AGGREGATED))
        self.assertEqual(report.sectors[0].n_records, 120)
        self.assertEqual(report.mode, "aggregated")
        self.assertIsNotNone(outcomes[0].frozen)

    def test_slower_than_mean_sector(self):
        """ Pooling four sectors costs more wall clock than training one of them on average """
        data = synthetic()
        per_sector, _ = run_pipeline(quick_config(), data)
        pooled, _ = run_pipeline(quick_config(mode="aggregated"), data)
        self.assertTrue(pooled.sectors[0].trained, pooled.sectors[0].skip_reason)
        self.assertGreater(pooled.sectors[0].wall_clock_seconds, per_sector.mean_sector_seconds)


class BoostingBenefitTest(EnsembleTestCase):
    """ `run_pipeline` - the committee against its best constituent """

    def committee_gap(self, config, **kwargs):
        report, _ = run_pipeline(config, synthetic(sectors=1, records_per_sector=400, informative=1, **kwargs))
        sector = report.sectors[0]
        self.assertTrue(sector.trained, sector.skip_reason)
        return sector.committee_test_error - min(entry.test_error for entry in sector.learners)

    def test_weak_rvm(self):
        """ With an RVM that almost never fires the committee stays within 0.02 of the best learner """
        config = quick_config(relief_top_m=1, rvm_threshold=0.99, max_trees=40, knn_members=11)
        seeds = self.seeds()
        close = sum(self.committee_gap(config, noise=0.1, seed=seed) <= 0.02 for seed in seeds)
        self.assertGreaterEqual(close / len(seeds), 0.9)

    def test_all_strong(self):
        """ On noise-free data the committee is no worse than the best learner by more than 0.03 """
        config = quick_config(relief_top_m=1, max_trees=40, knn_members=11)
        for seed in self.seeds():
            self.assertLessEqual(self.committee_gap(config, noise=0.0, seed=seed), 0.03)


class GammaFrequencyRunTest(EnsembleTestCase):
    """ Repeated kernel-width searches recorded in the report """

    def test_frequencies(self):
        """ Both searches report a distribution over the grid """
        report, _ = run_pipeline(quick_config(gamma_frequency_runs=3), synthetic(sectors=1))
        frequency = report.sectors[0].gamma_frequency
        self.assertEqual(sorted(frequency), ["rvm", "svm"])
        for distribution in frequency.values():
            self.assertAlmostEqual(sum(distribution.values()), 1.0)


class QuarterFilterTest(EnsembleTestCase):
    """ Restricting a run to chosen quarters """

    def test_only_requested_quarters(self):
        """ Records outside the requested quarters are dropped before training """
        data = synthetic(sectors=1, records_per_sector=60, quarters=2)
        report, _ = run_pipeline(quick_config(quarters=("2009Q2",)), data)
        self.assertEqual(report.sectors[0].n_records, 60)

    def test_absent_quarters_skip_the_run(self):
        """ Asking only for quarters that are not present is a missing-quarter error """
        with self.assertRaises(MissingQuarter):
            run_pipeline(quick_config(quarters=("2012Q1",)), synthetic(sectors=1))


class BacktestForwardTest(EnsembleTestCase):
    """ `backtest_forward` - frozen committees scored over later quarters """

    def test_shift_degrades_errors(self):
        """ Errors stay low before a planted shift and rise after it """
        data = synthetic(sectors=1, records_per_sector=300, informative=2, noise=0.1, quarters=4,
                         shift_quarter=Quarter(2009, 3))
        series = backtest_forward(quick_config(), "2009Q1", "2009Q4", data)[0]
        self.assertIsNone(series.skip_reason)
        self.assertEqual([(p.year, p.quarter) for p in series.points], [(2009, 2), (2009, 3), (2009, 4)])
        self.assertTrue(all(p.status == "ok" for p in series.points))
        before, after = series.errors[0], min(series.errors[1:])
        self.assertLess(before + 0.3, after)
        self.assertEqual(series.fingerprint_before, series.fingerprint_after)

    def test_single_step_horizon(self):
        """ A horizon of one quarter gives one point """
        data = synthetic(sectors=1, records_per_sector=80, quarters=2)
        series = backtest_forward(quick_config(), Quarter(2009, 1), Quarter(2009, 2), data)[0]
        self.assertEqual(len(series.points), 1)
        self.assertErrorRate(series.points[0].error_rate)

    def test_missing_quarter(self):
        """ An absent quarter inside the horizon is marked missing, and later ones are still scored """
        data = synthetic(sectors=1, records_per_sector=80, quarters=3)
        kept = data.subset(np.flatnonzero(data.quarter_indices != 2))
        series = backtest_forward(quick_config(), "2009Q1", "2009Q3", kept)[0]
        self.assertEqual([p.status for p in series.points], ["missing", "ok"])
        self.assertIsNone(series.points[0].error_rate)

    def test_missing_training_quarter(self):
        """ A sector with no records in the training quarter is reported, not trained """
        data = synthetic(sectors=1, records_per_sector=80, quarters=2, start_quarter=Quarter(2010, 1))
        series = backtest_forward(quick_config(), "2009Q4", "2010Q2", data)[0]
        self.assertIn("MissingQuarter", series.skip_reason)
        self.assertEqual(series.points, [])

    def test_horizon_must_follow_training(self):
        """ The horizon must end after the training quarter """
        with self.assertRaises(ConfigError):
            backtest_forward(quick_config(), "2009Q2", "2009Q2", synthetic(sectors=1))


class RunConfigTest(EnsembleTestCase):
    """ `RunConfig` - run settings from JSON and flags """

    def test_defaults_are_valid(self):
        """ The default configuration validates """
        config = RunConfig()
        config.validate()
        self.assertEqual(config.train_fraction, 0.10)
        self.assertEqual(config.gamma_grid, (0.5, 1.0, 2.0, 4.0))
        self.assertEqual(config.rvm_threshold, 0.8)
        self.assertEqual(config.committee_errors, "held_out")

    def test_unknown_key(self):
        """ Unknown keys are configuration errors """
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({"train_fractoin": 0.2})

    def test_invalid_values(self):
        """ Out-of-range settings are configuration errors """
        for document in ({"train_fraction": 1.0}, {"mode": "pooled"}, {"gamma_grid": [1.0, -2.0]},
                         {"rvm_threshold": 1.0}, {"relief_threshold": 0.5}, {"cv_folds": 1},
                         {"quarters": ["2009Q5"]}, {"committee_errors": "in_sample"}):
            with self.assertRaises(ConfigError, msg=str(document)):
                RunConfig.from_dict(document)

    def test_thresholds(self):
        """ Per-sector thresholds accept codes and names and override the default """
        self.assertEqual(parse_thresholds(["45=0.6", "Energy = 0.7"]), {45: 0.6, 10: 0.7})
        config = RunConfig.from_dict({"rvm_thresholds": {"45": 0.6}})
        self.assertEqual(config.threshold_for(Sector.INFORMATION_TECHNOLOGY), 0.6)
        self.assertEqual(config.threshold_for(Sector.ENERGY), 0.8)
        with self.assertRaises(ConfigError):
            parse_thresholds(["45"])
        with self.assertRaises(ConfigError):
            parse_thresholds(["Nowhere=0.5"])

    def test_json_round_trip(self):
        """ A configuration written as JSON reads back equal """
        config = RunConfig(seed=7, rvm_thresholds={45: 0.6}, quarters=("2009Q1",))
        path = os.path.join(self.make_workdir(), "config.json")
        with open(path, "w") as f:
            json.dump(config.to_dict(), f)
        self.assertEqual(RunConfig.from_json(path), config)

    def test_unreadable_json(self):
        """ Missing or malformed files are configuration errors """
        directory = self.make_workdir()
        with self.assertRaises(ConfigError):
            RunConfig.from_json(os.path.join(directory, "absent.json"))
        path = os.path.join(directory, "broken.json")
        with open(path, "w") as f:
            f.write("[1, 2")
        with self.assertRaises(ConfigError):
            RunConfig.from_json(path)

    def test_sector_seeds(self):
        """ Sector seeds are stable and differ between sectors """
        self.assertEqual(sector_seed(0, 10), sector_seed(0, 10))
        self.assertNotEqual(sector_seed(0, 10), sector_seed(0, 15))
        self.assertNotEqual(sector_seed(0, 10), sector_seed(1, 10))
