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
import logging
import sys

from utils.test_suite import DEFAULT_REPETITIONS, EnsembleTestRunner


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument(
        "--test-module",
        help="Specific test module to run",
        default=None
    )
    parser.add_argument(
        "--repetitions",
        help="Number of seeds the statistical tests try (100 for the full acceptance counts)",
        type=int,
        default=DEFAULT_REPETITIONS
    )
    parser.add_argument(
        "-v",
        "--verbose",
        help="More verbose test printing",
        default=False,
        action="store_true"
    )
    args = parser.parse_args()

    if args.repetitions < 1:
        print("--repetitions must be positive")
        sys.exit(2)

    # Library warnings are expected in the degenerate-input tests.
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR)
    verbosity = 2 if args.verbose else 1

    runner = EnsembleTestRunner(args.repetitions, verbosity=verbosity)
    suite = runner.loadTests(args.test_module)
    result = runner.run(suite)
    sys.exit(0 if result.wasSuccessful() else 1)
