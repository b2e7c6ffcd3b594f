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
Relief-F feature weighting.

A feature earns weight when it differs between a sampled record and its
nearest records of the other class (misses) more than between the record
and its nearest records of the same class (hits). Differences are scaled
by each feature's range, so weights lie in [-1, +1] and do not depend on
the units of the column.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from utils.dataset import POSITIVE, NEGATIVE, Dataset
from utils.errors import InsufficientClassData

logger = logging.getLogger(__name__)

DEFAULT_K_NEIGHBORS = 10
MAX_ITERATIONS = 200


@dataclass(frozen=True)
class ReliefWeights:
    raw: np.ndarray
    normalized: np.ndarray
    schema: tuple

    def ranked(self) -> list:
        """ (feature name, normalized weight) pairs, heaviest first """
        order = np.lexsort((np.arange(len(self.raw)), -self.normalized))
        return [(self.schema[j], float(self.normalized[j])) for j in order]


def _normalized(raw: np.ndarray) -> np.ndarray:
    low, high = raw.min(), raw.max()
    if high == low:
        return np.full(len(raw), 0.5)
    return (raw - low) / (high - low)


def normalize(weights: ReliefWeights) -> ReliefWeights:
    """ Min-max scales the raw weights into [0, 1]; a flat vector maps to 0.5 """
    raw = np.asarray(weights.raw, dtype=float)
    if raw.size == 0:
        raise ValueError("Cannot normalize an empty weight vector")
    return ReliefWeights(raw, _normalized(raw), tuple(weights.schema))


def _nearest(distances: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(distances[candidates], kind="stable")[:k]
    return candidates[order]


def relieff_samples(features: np.ndarray, labels: np.ndarray, samples, k_neighbors: int) -> np.ndarray:
    """ Raw Relief-F weights from an explicit sequence of sampled record indices """
    ranges = np.ptp(features, axis=0)
    varying = ranges > 0
    scale = np.where(varying, ranges, 1.0)
    weights = np.zeros(features.shape[1])
    samples = np.asarray(samples, dtype=np.int64)
    everyone = np.arange(len(labels))
    for i in samples:
        diffs = np.where(varying, np.abs(features - features[i]) / scale, 0.0)
        distances = diffs.sum(axis=1)
        same = (labels == labels[i]) & (everyone != i)
        hits = _nearest(distances, everyone[same], k_neighbors)
        misses = _nearest(distances, everyone[labels != labels[i]], k_neighbors)
        if len(misses):
            weights += diffs[misses].mean(axis=0)
        if len(hits):
            weights -= diffs[hits].mean(axis=0)
    return weights / len(samples)


def relieff(data: Dataset, k_neighbors: int = DEFAULT_K_NEIGHBORS, iterations: Optional[int] = None,
            seed: int = 0) -> ReliefWeights:
    """ Relief-F weights over `iterations` records sampled without replacement

    When a class has fewer than `k_neighbors` other records, every record
    of that class is used; an empty hit set contributes nothing.
    """
    counts = data.class_counts()
    if counts[POSITIVE] < 1 or counts[NEGATIVE] < 1:
        raise InsufficientClassData(f"Relief-F needs records of both classes, got {counts}")
    if k_neighbors < 1:
        raise ValueError(f"k_neighbors must be positive, got {k_neighbors}")
    n = len(data)
    if iterations is None:
        iterations = min(n, MAX_ITERATIONS)
    if iterations < 1:
        raise ValueError(f"iterations must be positive, got {iterations}")
    rng = np.random.default_rng(seed)
    samples = rng.choice(n, size=iterations, replace=iterations > n)
    raw = relieff_samples(data.features, data.labels, samples, k_neighbors)
    return ReliefWeights(raw, _normalized(raw), data.schema)


def select_features(weights: ReliefWeights, top_m: Optional[int] = None,
                    threshold: Optional[float] = None) -> tuple:
    """ Indices of retained features, ascending

    Exactly one policy is given: the `top_m` heaviest normalized weights
    (lower index wins ties) or every weight at or above `threshold`. An
    empty threshold selection falls back to the heaviest feature.
    """
    if (top_m is None) == (threshold is None):
        raise ValueError("Give exactly one of top_m or threshold")
    normalized = np.asarray(weights.normalized, dtype=float)
    d = len(normalized)
    if top_m is not None:
        if not 1 <= top_m <= d:
            raise ValueError(f"top_m must lie in 1..{d}, got {top_m}")
        order = np.lexsort((np.arange(d), -normalized))
        return tuple(sorted(int(j) for j in order[:top_m]))
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    chosen = np.flatnonzero(normalized >= threshold)
    if chosen.size == 0:
        return (int(np.argmax(normalized)),)
    return tuple(int(j) for j in chosen)


def export_weights_csv(weights: ReliefWeights, path) -> None:
    pd.DataFrame({
        "feature": list(weights.schema),
        "raw_weight": weights.raw,
        "normalized_weight": weights.normalized,
    }).to_csv(path, index=False)
