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
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from utils.dataset import NEGATIVE, POSITIVE, Dataset
from utils.errors import DimensionMismatch, SingleClassTraining


@dataclass(frozen=True)
class KernelParams:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


def as_matrix(x, dimension: int) -> np.ndarray:
    """ Accepts one feature vector or a matrix of them, checking the width """
    matrix = np.atleast_2d(np.asarray(x, dtype=float))
    if matrix.shape[1] != dimension:
        raise DimensionMismatch(f"Expected {dimension} features, got {matrix.shape[1]}")
    return matrix


def sign_labels(scores: np.ndarray) -> np.ndarray:
    """ +1 where the score is strictly positive, -1 otherwise (zero is -1) """
    return np.where(np.asarray(scores) > 0, POSITIVE, NEGATIVE)


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cdist(a, b, metric="sqeuclidean")


def rbf(x, z, gamma: float) -> float:
    """ exp(-gamma * |x - z|^2) """
    x = np.asarray(x, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    if x.shape != z.shape:
        raise DimensionMismatch(f"Cannot compare vectors of length {x.size} and {z.size}")
    return float(np.exp(-gamma * np.sum((x - z) ** 2)))


def rbf_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """ Gram matrix K[i, j] = rbf(a[i], b[j]) """
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"Cannot compare {a.shape[1]} and {b.shape[1]} features")
    return np.exp(-gamma * squared_distances(a, b))


def require_both_classes(train: Dataset, learner: str):
    if len(train) == 0 or not train.has_both_classes():
        raise SingleClassTraining(f"{learner} needs both classes in its training data")


class TrainedLearner(ABC):
    """ Base class for the fitted constituents of the committee """

    # Stable type name used in reports and the model envelope.
    name: str

    @property
    @abstractmethod
    def dimension(self) -> int:
        """ Number of features the learner expects """
        pass

    @abstractmethod
    def decide(self, x) -> np.ndarray:
        """ Hard +1/-1 decisions for one vector or a matrix of them """
        pass

    @abstractmethod
    def to_record(self) -> dict:
        """ JSON-compatible description of every fitted parameter """
        pass

    @classmethod
    @abstractmethod
    def from_record(cls, record: dict) -> "TrainedLearner":
        """ Rebuilds the learner from `to_record` output """
        pass

    def __repr__(self):
        return f"<{self.name} d={self.dimension}>"
