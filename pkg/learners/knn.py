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
k-nearest-neighbour posterior and a bagged committee of weak k-NN voters.

Neighbours are found by exact Euclidean scan; equal distances rank the
lower record index first.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from learners.base import TrainedLearner, as_matrix, sign_labels, squared_distances
from utils.dataset import NEGATIVE, POSITIVE, Dataset
from utils.errors import InvalidK, KTooLarge, TooFewRecords
from utils.modelsel import kfold_split

logger = logging.getLogger(__name__)

DEFAULT_MEMBERS = 100
DEFAULT_MAX_K = 100
DEFAULT_FOLDS = 10
SUBSET_FRACTION = 0.632


def _neighbour_labels(reference_features, reference_labels, queries, k) -> np.ndarray:
    """ Labels of the k nearest references per query, nearest first """
    order = np.argsort(squared_distances(queries, reference_features), axis=1, kind="stable")[:, :k]
    return reference_labels[order]


def knn_posterior(reference: Dataset, x, k: int):
    """ Fraction of the k nearest reference records labelled +1 """
    if k < 1:
        raise InvalidK(f"k must be positive, got {k}")
    if k > len(reference):
        raise KTooLarge(f"k={k} exceeds the {len(reference)} reference records")
    queries = as_matrix(x, reference.dimension)
    posterior = np.mean(_neighbour_labels(reference.features, reference.labels, queries, k) == POSITIVE, axis=1)
    return float(posterior[0]) if np.ndim(x) == 1 else posterior


@dataclass(frozen=True)
class KSelection:
    k_star: int
    cv_errors: np.ndarray
    folds: int
    seed: int

    @property
    def k_grid(self) -> np.ndarray:
        return np.arange(1, len(self.cv_errors) + 1)


def select_k(train: Dataset, max_k: int = DEFAULT_MAX_K, folds: int = DEFAULT_FOLDS, seed: int = 0) -> KSelection:
    """ Cross-validated choice of k over 1..max_k

    The grid stops at the size of the smallest training complement, and
    the first k reaching the minimal mean held-out error is returned.
    """
    n = len(train)
    if n < folds:
        raise TooFewRecords(f"Selecting k by {folds}-fold CV needs at least {folds} records, got {n}")
    cap = min(max_k, n - math.ceil(n / folds))
    plan = kfold_split(n, folds, seed)
    fold_errors = []
    for held_out in plan.folds:
        rest = np.setdiff1d(np.arange(n), held_out)
        labels = _neighbour_labels(train.features[rest], train.labels[rest], train.features[held_out], cap)
        positives = np.cumsum(labels == POSITIVE, axis=1)
        predictions = np.where(positives / np.arange(1, cap + 1) > 0.5, POSITIVE, NEGATIVE)
        fold_errors.append(np.mean(predictions != train.labels[held_out][:, None], axis=0))
    cv_errors = np.mean(fold_errors, axis=0)
    k_star = int(np.argmin(cv_errors)) + 1
    logger.debug("Selected k*=%d with CV error %.4f (grid 1..%d)", k_star, cv_errors[k_star - 1], cap)
    return KSelection(k_star, cv_errors, folds, seed)


def member_subset_size(n: int, fraction: float = SUBSET_FRACTION) -> int:
    return max(1, min(n, math.ceil(round(fraction * n, 9))))


@dataclass(frozen=True, eq=False)
class KnnCommittee(TrainedLearner):
    """ Weak k-NN voters sharing one training matrix and one k """
    features: np.ndarray
    labels: np.ndarray
    member_indices: tuple
    k: int

    name = "knn"

    def __post_init__(self):
        if len(self.member_indices) < 1:
            raise ValueError("A k-NN committee needs at least one member")
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "member_indices",
                           tuple(np.asarray(m, dtype=np.int64) for m in self.member_indices))

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    def member_k(self, member: int) -> int:
        return min(self.k, len(self.member_indices[member]))

    def member_votes(self, x) -> np.ndarray:
        """ Hard decision of every member, one row per member """
        queries = as_matrix(x, self.dimension)
        distances = squared_distances(queries, self.features)
        votes = []
        for m, indices in enumerate(self.member_indices):
            order = np.argsort(distances[:, indices], axis=1, kind="stable")[:, :self.member_k(m)]
            posterior = np.mean(self.labels[indices][order] == POSITIVE, axis=1)
            votes.append(np.where(posterior > 0.5, POSITIVE, NEGATIVE))
        return np.stack(votes)

    def decide(self, x) -> np.ndarray:
        return sign_labels(self.member_votes(x).sum(axis=0))

    def to_record(self) -> dict:
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "member_indices": [m.tolist() for m in self.member_indices],
            "k": self.k,
        }

    @classmethod
    def from_record(cls, record: dict) -> "KnnCommittee":
        return cls(
            features=record["features"],
            labels=record["labels"],
            member_indices=tuple(record["member_indices"]),
            k=int(record["k"]),
        )


def train_committee(train: Dataset, members: int = DEFAULT_MEMBERS, k_star: int = 1, seed: int = 0,
                    subset_fraction: float = SUBSET_FRACTION) -> KnnCommittee:
    """ Draws each member's reference set uniformly without replacement """
    if len(train) == 0:
        raise ValueError("Cannot build a k-NN committee from no records")
    if k_star < 1:
        raise InvalidK(f"k must be positive, got {k_star}")
    n = len(train)
    size = member_subset_size(n, subset_fraction)
    rng = np.random.default_rng(seed)
    member_indices = tuple(np.sort(rng.choice(n, size=size, replace=False)) for _ in range(members))
    if k_star > size:
        logger.debug("Clamping k*=%d to the member reference size %d", k_star, size)
    return KnnCommittee(train.features, train.labels, member_indices, k_star)


def committee_predict(committee: KnnCommittee, x) -> np.ndarray:
    return committee.decide(x)


def export_k_curve_csv(selection: KSelection, path) -> None:
    pd.DataFrame({"k": selection.k_grid, "cv_error": selection.cv_errors}).to_csv(path, index=False)
