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
Soft-margin RBF support vector machine.

The dual is solved by sequential minimal optimization, updating the
maximal-violating pair of dual variables at each step. The solver works
on the minimisation form f(a) = a'Qa/2 - sum(a) with Q = yy' * K and keeps
the gradient G = Qa - 1 up to date.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from learners.base import (
    KernelParams, TrainedLearner, as_matrix, rbf, rbf_matrix, require_both_classes, sign_labels
)
from utils.dataset import Dataset
from utils.errors import NonConvergence

logger = logging.getLogger(__name__)

DEFAULT_C = 2.0
KKT_TOLERANCE = 1e-3
MAX_UPDATES = 100_000
# Stand-in curvature when a pair's curvature is not positive.
TAU = 1e-12

__all__ = ["rbf", "DualSolution", "SvmModel", "solve_dual", "train_svm", "svm_predict"]


@dataclass
class DualSolution:
    alphas: np.ndarray
    bias: float
    converged: bool
    updates: int
    violation: float
    objective_trace: list = field(default_factory=list)

    def dual_objective(self, gram: np.ndarray, labels: np.ndarray) -> float:
        ay = self.alphas * labels
        return float(self.alphas.sum() - 0.5 * ay @ gram @ ay)


def _violating_pair(alphas, labels, gradient, c):
    score = -labels * gradient
    up = ((labels > 0) & (alphas < c)) | ((labels < 0) & (alphas > 0))
    low = ((labels > 0) & (alphas > 0)) | ((labels < 0) & (alphas < c))
    if not up.any() or not low.any():
        return None, None, 0.0
    up_indices = np.flatnonzero(up)
    low_indices = np.flatnonzero(low)
    i = int(up_indices[np.argmax(score[up_indices])])
    j = int(low_indices[np.argmin(score[low_indices])])
    return i, j, float(score[i] - score[j])


def _bias(alphas, labels, gradient, c) -> float:
    y_gradient = labels * gradient
    free = (alphas > 0) & (alphas < c)
    if free.any():
        return float(-np.mean(y_gradient[free]))
    at_upper = alphas >= c
    # Bounds on rho = -bias from the variables stuck at 0 or C.
    upper_side = (at_upper & (labels < 0)) | (~at_upper & (labels > 0))
    ub = y_gradient[upper_side].min() if upper_side.any() else np.inf
    lb = y_gradient[~upper_side].max() if (~upper_side).any() else -np.inf
    if not np.isfinite(ub):
        ub = lb
    if not np.isfinite(lb):
        lb = ub
    return float(-(ub + lb) / 2.0)


def solve_dual(gram: np.ndarray, labels: np.ndarray, c: float = DEFAULT_C,
               tolerance: float = KKT_TOLERANCE, max_updates: int = MAX_UPDATES,
               trace: bool = False) -> DualSolution:
    """ SMO on a precomputed Gram matrix

    Stops when the maximal KKT violation falls below `tolerance` or after
    `max_updates` pair updates, in which case `converged` is False.
    """
    labels = np.asarray(labels, dtype=float)
    n = len(labels)
    alphas = np.zeros(n)
    gradient = -np.ones(n)
    solution = DualSolution(alphas, 0.0, False, 0, np.inf)

    updates = 0
    while True:
        i, j, violation = _violating_pair(alphas, labels, gradient, c)
        if i is None or violation < tolerance:
            solution.converged = True
            break
        if updates >= max_updates:
            break
        curvature = gram[i, i] + gram[j, j] - 2.0 * gram[i, j]
        step = violation / (curvature if curvature > 0 else TAU)
        # Largest step keeping both variables inside the box.
        limit_i = c - alphas[i] if labels[i] > 0 else alphas[i]
        limit_j = alphas[j] if labels[j] > 0 else c - alphas[j]
        step = min(step, limit_i, limit_j)

        alphas[i] = alphas[i] + labels[i] * step
        alphas[j] = alphas[j] - labels[j] * step
        # Land exactly on the bound that limited the step.
        if step == limit_i:
            alphas[i] = c if labels[i] > 0 else 0.0
        if step == limit_j:
            alphas[j] = 0.0 if labels[j] > 0 else c
        gradient += step * labels * (gram[:, i] - gram[:, j])
        updates += 1
        if trace:
            solution.objective_trace.append(float(-0.5 * alphas @ (gradient - 1.0)))

    if not solution.converged:
        logger.warning("SMO stopped after %d updates with KKT violation %.2e", updates, violation)
    solution.alphas = alphas
    solution.bias = _bias(alphas, labels, gradient, c)
    solution.updates = updates
    solution.violation = violation
    return solution


@dataclass(frozen=True, eq=False)
class SvmModel(TrainedLearner):
    support_vectors: np.ndarray
    support_labels: np.ndarray
    alphas: np.ndarray
    bias: float
    kernel: KernelParams
    c: float = DEFAULT_C
    converged: bool = True

    name = "svm"

    def __post_init__(self):
        support_vectors = np.asarray(self.support_vectors, dtype=float)
        alphas = np.asarray(self.alphas, dtype=float).ravel()
        object.__setattr__(self, "support_vectors", support_vectors)
        object.__setattr__(self, "support_labels", np.asarray(self.support_labels, dtype=float).ravel())
        object.__setattr__(self, "alphas", alphas)
        if np.any(alphas <= 0) or np.any(alphas > self.c):
            raise ValueError("Stored support vectors need 0 < alpha <= C")

    @property
    def dimension(self) -> int:
        return self.support_vectors.shape[1]

    def decision_function(self, x) -> np.ndarray:
        x = as_matrix(x, self.dimension)
        if len(self.alphas) == 0:
            return np.full(len(x), self.bias)
        return rbf_matrix(x, self.support_vectors, self.kernel.gamma) @ (self.alphas * self.support_labels) + self.bias

    def decide(self, x) -> np.ndarray:
        return sign_labels(self.decision_function(x))

    def to_record(self) -> dict:
        return {
            "n_features": self.dimension,
            "support_vectors": self.support_vectors.tolist(),
            "support_labels": self.support_labels.astype(int).tolist(),
            "alphas": self.alphas.tolist(),
            "bias": self.bias,
            "gamma": self.kernel.gamma,
            "c": self.c,
            "converged": self.converged,
        }

    @classmethod
    def from_record(cls, record: dict) -> "SvmModel":
        vectors = np.asarray(record["support_vectors"], dtype=float)
        return cls(
            support_vectors=vectors.reshape(-1, int(record["n_features"])),
            support_labels=record["support_labels"],
            alphas=record["alphas"],
            bias=float(record["bias"]),
            kernel=KernelParams(float(record["gamma"])),
            c=float(record["c"]),
            converged=bool(record["converged"]),
        )


def train_svm(train: Dataset, gamma: float, c: float = DEFAULT_C, strict: bool = False,
              max_updates: int = MAX_UPDATES) -> SvmModel:
    """ Fits the SVM, keeping only the records with a nonzero dual variable

    A solver that hits the update cap returns its best-so-far model with
    `converged=False`; with `strict=True` it raises NonConvergence instead.
    """
    require_both_classes(train, "SVM")
    kernel = KernelParams(gamma)
    gram = rbf_matrix(train.features, train.features, kernel.gamma)
    labels = train.labels.astype(float)
    solution = solve_dual(gram, labels, c, max_updates=max_updates)
    if strict and not solution.converged:
        raise NonConvergence(f"SMO did not converge within {max_updates} updates")
    support = solution.alphas > 0
    logger.debug("SVM gamma=%s kept %d of %d records as support vectors", gamma, int(support.sum()), len(train))
    return SvmModel(
        support_vectors=train.features[support],
        support_labels=labels[support],
        alphas=solution.alphas[support],
        bias=solution.bias,
        kernel=kernel,
        c=c,
        converged=solution.converged,
    )


def svm_predict(model: SvmModel, x) -> np.ndarray:
    return model.decide(x)
