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

import contextlib
import io
import json
import os

from sector_ensemble import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, build_parser, load_config, main
from utils.report import validate_report
from utils.test_suite import EnsembleTestCase

QUICK_FLAGS = [
    "--train-fraction", "0.3", "--gamma-grid", "1.0", "2.0", "--max-trees", "20", "--knn-members", "5",
    "--knn-max-k", "10", "--knn-folds", "5", "--cv-folds", "3", "--relief-top-m", "5",
]


def run(*argv) -> int:
    with contextlib.redirect_stdout(io.StringIO()):
        return main(list(argv))


class CommandLineTest(EnsembleTestCase):
    """ `sector-ensemble` - generate, train, backtest and report """

    def test_generate_train_report(self):
        """ The full workflow succeeds and leaves a valid report, models and extracts """
        directory = self.make_workdir()
        data = os.path.join(directory, "data.csv")
        results = os.path.join(directory, "results")
        self.assertEqual(run("generate", data, "--sectors", "2", "--records", "100", "--noise", "0.2"), EXIT_OK)
        self.assertEqual(run("train", "--input", data, "--output-dir", results, *QUICK_FLAGS), EXIT_OK)

        report_path = os.path.join(results, "report.json")
        with open(report_path) as f:
            self.assertEqual(validate_report(json.load(f)), [])
        self.assertEqual(sorted(os.listdir(os.path.join(results, "models"))), ["sector_10.json", "sector_15.json"])

        extracts = os.path.join(directory, "extracts")
        self.assertEqual(run("report", report_path, "--extracts", extracts), EXIT_OK)
        self.assertIn("oob_10.csv", os.listdir(extracts))

    def test_backtest(self):
        """ A backtest writes one forward series per sector """
        directory = self.make_workdir()
        data = os.path.join(directory, "data.csv")
        run("generate", data, "--sectors", "1", "--records", "80", "--quarters", "3", "--noise", "0.2")
        code = run("backtest", "--input", data, "--output-dir", directory, "--train-quarter", "2009Q1",
                   "--horizon-end", "2009Q3", *QUICK_FLAGS)
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(directory, "backtest.json")) as f:
            document = json.load(f)
        self.assertEqual(len(document["forward"]), 1)
        self.assertEqual(len(document["forward"][0]["points"]), 2)

    def test_missing_input(self):
        """ An input file that does not exist is an input error """
        directory = self.make_workdir()
        code = run("train", "--input", os.path.join(directory, "absent.csv"), "--output-dir", directory)
        self.assertEqual(code, EXIT_INPUT)

    def test_empty_input(self):
        """ An empty input file is an input error """
        path = os.path.join(self.make_workdir(), "empty.csv")
        open(path, "w").close()
        self.assertEqual(run("train", "--input", path, "--output-dir", self.make_workdir()), EXIT_INPUT)

    def test_config_errors(self):
        """ Invalid settings exit with the configuration code """
        directory = self.make_workdir()
        data = os.path.join(directory, "data.csv")
        run("generate", data, "--sectors", "1", "--records", "50")
        self.assertEqual(run("train", "--input", data, "--train-fraction", "1.5"), EXIT_CONFIG)
        self.assertEqual(run("train", "--input", data, "--rvm-threshold", "Nowhere=0.5"), EXIT_CONFIG)
        self.assertEqual(run("train", "--output-dir", directory), EXIT_CONFIG)
        self.assertEqual(run("backtest", "--input", data, "--output-dir", directory), EXIT_CONFIG)
        self.assertEqual(run("generate", os.path.join(directory, "x.csv"), "--sectors", "0"), EXIT_CONFIG)

    def test_invalid_report(self):
        """ A report failing validation is an input error """
        path = os.path.join(self.make_workdir(), "report.json")
        with open(path, "w") as f:
            json.dump({"format": "something-else"}, f)
        self.assertEqual(run("report", path), EXIT_INPUT)


class LoadConfigTest(EnsembleTestCase):
    """ `load_config` - config file overridden by flags """

    def test_flags_override_file(self):
        """ A flag wins over the same key in the config file """
        path = os.path.join(self.make_workdir(), "config.json")
        with open(path, "w") as f:
            json.dump({"seed": 3, "train_fraction": 0.2, "rvm_thresholds": {"10": 0.7}}, f)
        args = build_parser().parse_args([
            "train", "--config", path, "--seed", "9", "--rvm-threshold", "0.6", "--rvm-threshold", "45=0.9",
        ])
        config = load_config(args)
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.train_fraction, 0.2)
        self.assertEqual(config.rvm_threshold, 0.6)
        self.assertEqual(config.rvm_thresholds, {10: 0.7, 45: 0.9})

    def test_relief_policies_exclude_each_other(self):
        """ Choosing a Relief-F threshold drops the default top-m """
        config = load_config(build_parser().parse_args(["train", "--relief-threshold", "0.4"]))
        self.assertIsNone(config.relief_top_m)
        self.assertEqual(config.relief_threshold, 0.4)

    def test_committee_errors_flag(self):
        """ The committee weights default to held-out errors and the flag selects training errors """
        self.assertEqual(load_config(build_parser().parse_args(["train"])).committee_errors, "held_out")
        args = build_parser().parse_args(["train", "--committee-errors", "training"])
        self.assertEqual(load_config(args).committee_errors, "training")
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["train", "--committee-errors", "in_sample"])
