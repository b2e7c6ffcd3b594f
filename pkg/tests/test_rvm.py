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

import math

import numpy as np
from hypothesis import given, strategies as st

from learners.base import KernelParams
from learners.rvm import BIAS_PRECISION, RvmConfig, RvmModel, rvm_predict, rvm_probability, sigmoid, train_rvm
from utils.committee import error_rate
from utils.dataset import Dataset
from utils.errors import DimensionMismatch, NumericalFailure, SingleClassTraining
from utils.test_suite import EnsembleTestCase, gaussian_blobs


def bias_only(bias, threshold=0.8):
    return RvmModel(np.empty((0, 1)), [], bias, KernelParams(1.0), [], n_features=1, threshold=threshold)


class SigmoidTest(EnsembleTestCase):
    """ `sigmoid` - the logistic link """

    def test_examples(self):
        """ 0 maps to 0.5 and ln 4 to 0.8 """
        self.assertEqual(sigmoid(0.0), 0.5)
        self.assertAlmostEqual(sigmoid(math.log(4.0)), 0.8, places=12)

    def test_symmetry(self):
        """ sigmoid(t) + sigmoid(-t) is one """
        for theta in (0.1, 1.0, 10.0):
            self.assertAlmostEqual(sigmoid(theta) + sigmoid(-theta), 1.0, places=12)

    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_monotone(self, a, b):
        """ Larger arguments never give smaller values """
        if a <= b:
            self.assertLessEqual(sigmoid(a), sigmoid(b))


class TrainRvmTest(EnsembleTestCase):
    """ `train_rvm` - evidence maximisation with pruning """

    def test_separated_gaussians(self):
        """ Separated classes give a sparse model with a low held-out error """
        train = gaussian_blobs(100, separation=4.0, seed=1)
        test = gaussian_blobs(400, separation=4.0, seed=2)
        model = train_rvm(train, gamma=0.5)
        self.assertLessEqual(len(model.weights), 25)
        self.assertLessEqual(error_rate(rvm_predict(model, test.features, 0.5), test.labels), 0.10)

    def test_tiny_xor(self):
        """ Four XOR records either fail numerically or give a near-constant forecast """
        data = Dataset.from_arrays([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]], [1, 1, -1, -1])
        try:
            model = train_rvm(data, gamma=1.0)
        except NumericalFailure:
            return
        probabilities = model.probability(data.features)
        self.assertLess(np.ptp(probabilities), 0.2)

    def test_small_training_set_is_a_numerical_failure(self):
        """ Below the record floor training stops with NumericalFailure """
        data = Dataset.from_arrays([[0.0], [1.0], [2.0], [3.0]], [-1, -1, 1, 1])
        with self.assertRaises(NumericalFailure):
            train_rvm(data, gamma=1.0, config=RvmConfig(min_records=8))

    def test_deterministic(self):
        """ Two identical runs keep the same bases and weights """
        data = gaussian_blobs(60, separation=2.0, seed=3)
        first = train_rvm(data, gamma=1.0)
        second = train_rvm(data, gamma=1.0)
        np.testing.assert_array_equal(first.relevance_vectors, second.relevance_vectors)
        np.testing.assert_allclose(first.weights, second.weights, atol=1e-8)

    def test_evidence_never_drops(self):
        """ The log-evidence does not decrease across outer iterations """
        data = gaussian_blobs(40, separation=1.5, seed=4)
        model = train_rvm(data, gamma=1.0)
        self.assertGreater(len(model.evidence_trace), 1)
        self.assertTrue(np.all(np.diff(model.evidence_trace) >= -1e-6))

    def test_retained_precisions_below_cap(self):
        """ Every kept basis has a precision below the pruning cap """
        data = gaussian_blobs(60, separation=2.0, seed=5)
        model = train_rvm(data, gamma=1.0)
        self.assertTrue(np.all(model.precisions < 1e12))
        self.assertEqual(len(model.precisions), len(model.weights))

    def test_pruning_does_not_change_predictions(self):
        """ Pruned and unpruned fits give nearly the same probabilities """
        data = gaussian_blobs(30, separation=2.0, seed=6)
        pruned = train_rvm(data, gamma=1.0)
        unpruned = train_rvm(data, gamma=1.0, config=RvmConfig(prune_precision=math.inf))
        grid = np.array([[a, b] for a in np.linspace(-3, 3, 9) for b in np.linspace(-3, 3, 9)])
        np.testing.assert_allclose(pruned.probability(grid), unpruned.probability(grid), atol=1e-2)

    def test_single_class(self):
        """ One class is not enough to train on """
        data = Dataset.from_arrays(np.arange(10.0).reshape(-1, 1), [-1] * 10)
        with self.assertRaises(SingleClassTraining):
            train_rvm(data, gamma=1.0)

    def test_bias_follows_class_imbalance(self):
        """ On uninformative records with four positives in five the bias moves away from zero """
        rng = np.random.default_rng(7)
        labels = np.where(np.arange(100) % 5 == 0, -1, 1)
        data = Dataset.from_arrays(rng.normal(size=(100, 2)), labels)
        model = train_rvm(data, gamma=1.0)
        self.assertEqual(model.bias_precision, BIAS_PRECISION)
        self.assertGreater(model.bias, 0.5)
        self.assertGreater(rvm_probability(model, [[50.0, 50.0]])[0], 0.6)

    def test_converges_sparse(self):
        """ Overlapping classes converge before the iteration cap with a minority of relevance vectors """
        for seed in self.seeds():
            model = train_rvm(gaussian_blobs(60, separation=1.5, seed=seed), gamma=0.5)
            self.assertTrue(model.converged)
            self.assertLess(len(model.weights), 30)


class RvmProbabilityTest(EnsembleTestCase):
    """ `rvm_probability` - sigmoid of the kernel expansion """

    def test_bias_only(self):
        """ Without relevance vectors the probability is the sigmoid of the bias """
        self.assertEqual(rvm_probability(bias_only(0.0), [1.0])[0], 0.5)
        self.assertAlmostEqual(rvm_probability(bias_only(math.log(4.0)), [1.0])[0], 0.8, places=12)

    def test_monotone_in_bias(self):
        """ Raising the bias raises the probability """
        values = [rvm_probability(bias_only(b), [0.0])[0] for b in np.linspace(-3, 3, 13)]
        self.assertTrue(np.all(np.diff(values) > 0))

    def test_open_interval(self):
        """ Probabilities of a trained model stay strictly between 0 and 1 """
        data = gaussian_blobs(60, separation=3.0, seed=7)
        model = train_rvm(data, gamma=1.0)
        queries = np.random.default_rng(1).normal(scale=3.0, size=(200, 2))
        probabilities = model.probability(queries)
        self.assertTrue(np.all((probabilities > 0) & (probabilities < 1)))

    def test_dimension_mismatch(self):
        """ A vector of the wrong width is refused """
        with self.assertRaises(DimensionMismatch):
            rvm_probability(bias_only(0.0), [0.0, 1.0])


class RvmPredictTest(EnsembleTestCase):
    """ `rvm_predict` - thresholding the probability """

    def test_examples(self):
        """ 0.81 clears 0.8, and 0.6 clears 0.5 """
        self.assertEqual(rvm_predict(bias_only(math.log(0.81 / 0.19)), [0.0])[0], 1)
        self.assertEqual(rvm_predict(bias_only(math.log(0.6 / 0.4)), [0.0], threshold=0.5)[0], 1)
        self.assertEqual(rvm_predict(bias_only(math.log(0.6 / 0.4)), [0.0])[0], -1)

    def test_strict_inequality(self):
        """ A probability equal to the threshold is -1 """
        model = bias_only(math.log(4.0))
        p = float(model.probability([0.0])[0])
        self.assertEqual(rvm_predict(model, [0.0], threshold=p)[0], -1)

    def test_per_model_threshold(self):
        """ A model carries its own default threshold """
        model = bias_only(math.log(0.6 / 0.4)).with_threshold(0.5)
        self.assertEqual(model.decide([0.0])[0], 1)
        with self.assertRaises(ValueError):
            model.with_threshold(1.0)

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_lower_threshold_keeps_positives(self, low, high):
        """ Lowering the threshold never turns a +1 into a -1 """
        if low > high:
            low, high = high, low
        model = RvmModel([[0.0], [1.0]], [1.5, -2.0], 0.2, KernelParams(1.0), [1.0, 1.0], n_features=1)
        queries = np.linspace(-2, 3, 41).reshape(-1, 1)
        at_high = rvm_predict(model, queries, high)
        at_low = rvm_predict(model, queries, low)
        self.assertTrue(np.all(at_low[at_high == 1] == 1))
