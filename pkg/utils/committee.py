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
Boosted committee of the constituent learners.

Each learner's vote is weighted by the log-odds of its training accuracy,
log((1 - e) / e). Example weights are never updated, so e is the plain
training error rate, unless the caller supplies out-of-sample estimates
for e instead.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from learners.base import TrainedLearner, as_matrix, sign_labels
from utils.dataset import NEGATIVE, POSITIVE, Dataset
from utils.errors import EmptyPredictions, EmptyTraining, LengthMismatch

logger = logging.getLogger(__name__)

# Weights are clamped to +-log(1e6) so perfect or perfectly wrong learners stay finite.
MAX_ALPHA = math.log(1e6)


def error_rate(predictions, truth) -> float:
    """ Fraction of predictions that differ from the truth """
    predictions = np.asarray(predictions).ravel()
    truth = np.asarray(truth).ravel()
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise EmptyPredictions("Cannot score an empty set of predictions")
    return float(np.mean(predictions != truth))


def boosting_weight(epsilon: float) -> float:
    if epsilon <= 0:
        return MAX_ALPHA
    if epsilon >= 1:
        return -MAX_ALPHA
    return float(np.clip(math.log((1 - epsilon) / epsilon), -MAX_ALPHA, MAX_ALPHA))


@dataclass(frozen=True, eq=False)
class CommitteeModel(TrainedLearner):
    learners: tuple
    alphas: tuple
    training_errors: tuple

    name = "committee"

    def __post_init__(self):
        if len(self.learners) != len(self.alphas) or len(self.learners) != len(self.training_errors):
            raise ValueError("Every learner needs one weight and one training error")
        if not self.learners:
            raise ValueError("A committee needs at least one learner")
        if not all(math.isfinite(a) for a in self.alphas):
            raise ValueError("Committee weights must be finite")

    @property
    def dimension(self) -> int:
        return self.learners[0].dimension

    def votes(self, x) -> np.ndarray:
        """ Per-learner decisions, one row per learner """
        x = as_matrix(x, self.dimension)
        return np.stack([learner.decide(x) for learner in self.learners])

    def decide(self, x) -> np.ndarray:
        return sign_labels(np.asarray(self.alphas) @ self.votes(x))

    def margin(self, x) -> np.ndarray:
        """ Weighted vote divided by the total absolute weight, in [-1, 1] """
        total = float(np.sum(np.abs(self.alphas)))
        if total == 0:
            return np.zeros(len(as_matrix(x, self.dimension)))
        return (np.asarray(self.alphas) @ self.votes(x)) / total

    def to_record(self) -> dict:
        return {
            "learners": [{"type": learner.name, "model": learner.to_record()} for learner in self.learners],
            "alphas": list(self.alphas),
            "training_errors": list(self.training_errors),
        }

    @classmethod
    def from_record(cls, record: dict) -> "CommitteeModel":
        from utils.model_types import decode_learner

        return cls(
            learners=tuple(decode_learner(entry) for entry in record["learners"]),
            alphas=tuple(float(a) for a in record["alphas"]),
            training_errors=tuple(float(e) for e in record["training_errors"]),
        )


def fit_committee(models: Sequence[TrainedLearner], train: Dataset,
                  errors: Optional[Sequence[float]] = None) -> CommitteeModel:
    """ Weighs each trained learner by its error on `train`

    `errors` replaces the training errors with estimates made elsewhere,
    such as out-of-bag or cross-validated errors on the same records.
    """
    if len(train) == 0:
        raise EmptyTraining("Cannot weigh learners on an empty training set")
    models = tuple(models)
    if errors is None:
        errors = tuple(error_rate(model.decide(train.features), train.labels) for model in models)
    else:
        errors = tuple(float(e) for e in errors)
        if len(errors) != len(models):
            raise LengthMismatch(f"{len(errors)} error estimates for {len(models)} learners")
        if not all(0.0 <= e <= 1.0 for e in errors):
            raise ValueError(f"Error estimates must lie in [0, 1], got {errors}")
    alphas = tuple(boosting_weight(e) for e in errors)
    for model, e, a in zip(models, errors, alphas):
        logger.debug("%s: error %.4f, weight %.4f", model.name, e, a)
    return CommitteeModel(models, alphas, errors)


def committee_decide(model: CommitteeModel, x) -> np.ndarray:
    return model.decide(x)


def committee_margin(model: CommitteeModel, x) -> np.ndarray:
    return model.margin(x)


def naive_vote(learners: Sequence[TrainedLearner], x) -> np.ndarray:
    """ Unweighted majority of the learners' decisions, ties to -1 """
    return sign_labels(np.sum([learner.decide(x) for learner in learners], axis=0))


def majority_label(labels) -> int:
    labels = np.asarray(labels)
    return POSITIVE if np.sum(labels == POSITIVE) > np.sum(labels == NEGATIVE) else NEGATIVE


def majority_class_error(train_labels, test_labels) -> float:
    """ Test error of always predicting the most common training label """
    test_labels = np.asarray(test_labels)
    return error_rate(np.full(len(test_labels), majority_label(train_labels)), test_labels)


def positive_rate(predictions) -> float:
    predictions = np.asarray(predictions)
    if len(predictions) == 0:
        raise EmptyPredictions("Cannot measure the positive rate of no predictions")
    return float(np.mean(predictions == POSITIVE))
