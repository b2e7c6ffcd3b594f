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
Relevance vector machine classifier.

The model is a logistic sigmoid over a bias plus one RBF basis function
per training record, each weight with its own Gaussian precision. Fitting
alternates a Laplace approximation of the weight posterior (Newton/IRLS on
the penalised log-likelihood) with evidence re-estimation of the
precisions, pruning every basis whose precision diverges.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from learners.base import KernelParams, TrainedLearner, as_matrix, rbf_matrix, require_both_classes
from utils.dataset import NEGATIVE, POSITIVE, Dataset
from utils.errors import NumericalFailure

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.8
PRUNE_PRECISION = 1e12
MIN_PRECISION = 1e-6
MAX_PRECISION = 1e300
# Near-flat prior on the bias; never re-estimated.
BIAS_PRECISION = 1e-6
JITTERS = (1e-8, 1e-6, 1e-4, 1e-2)
# Damping steps tried when the full precision update would lower the evidence.
MAX_DAMPING_STEPS = 8
EVIDENCE_SLACK = 1e-9


def sigmoid(theta):
    """ Logistic function 1 / (1 + exp(-theta)) """
    value = expit(theta)
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class RvmConfig:
    max_iterations: int = 1000
    tolerance: float = 1e-3
    prune_precision: float = PRUNE_PRECISION
    initial_precision: float = 1.0
    # Below this many records the Hessian is too poorly determined to trust. The pipeline
    # skips sectors whose cross-validation complements would fall under it.
    min_records: int = 8
    max_newton_steps: int = 50


@dataclass
class _Laplace:
    weights: np.ndarray
    factor: tuple
    log_evidence: float


def _cholesky(hessian: np.ndarray) -> tuple:
    if not np.all(np.isfinite(hessian)):
        raise NumericalFailure("Non-finite Hessian in the RVM Laplace step")
    identity = np.eye(len(hessian))
    for jitter in JITTERS:
        try:
            return cho_factor(hessian + jitter * identity, lower=True)
        except LinAlgError:
            logger.debug("Cholesky failed with jitter %g, escalating", jitter)
    raise NumericalFailure("RVM Hessian is not positive definite after jitter escalation")


def _penalised_log_likelihood(design, targets, precisions, weights) -> float:
    scores = design @ weights
    log_likelihood = np.sum(targets * scores - np.logaddexp(0.0, scores))
    return float(log_likelihood - 0.5 * np.sum(precisions * weights ** 2))


def _laplace(design, targets, precisions, start, config: RvmConfig) -> _Laplace:
    """ Posterior mode by damped Newton steps, then the Laplace log-evidence at the mode """
    weights = start.copy()
    objective = _penalised_log_likelihood(design, targets, precisions, weights)
    for _ in range(config.max_newton_steps):
        p = expit(design @ weights)
        gradient = design.T @ (targets - p) - precisions * weights
        hessian = (design.T * (p * (1 - p))) @ design + np.diag(precisions)
        direction = cho_solve(_cholesky(hessian), gradient)
        step = 1.0
        while step > 1e-8:
            candidate = weights + step * direction
            candidate_objective = _penalised_log_likelihood(design, targets, precisions, candidate)
            if candidate_objective >= objective:
                break
            step /= 2.0
        else:
            break
        moved = np.max(np.abs(candidate - weights))
        weights, objective = candidate, candidate_objective
        if moved < 1e-6 * max(1.0, np.max(np.abs(weights))):
            break

    p = expit(design @ weights)
    hessian = (design.T * (p * (1 - p))) @ design + np.diag(precisions)
    factor = _cholesky(hessian)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    log_evidence = objective + 0.5 * np.sum(np.log(precisions)) - 0.5 * log_det
    if not np.isfinite(log_evidence):
        raise NumericalFailure("RVM log-evidence is not finite")
    return _Laplace(weights, factor, float(log_evidence))


def _precision_proposal(state: _Laplace, precisions: np.ndarray) -> np.ndarray:
    """ Re-estimated precisions gamma_i / w_i^2 for every basis after the bias

    A basis whose squared weight does not exceed gamma_i * Sigma_ii has its
    evidence maximised at infinite precision, so it is sent straight to the
    cap instead of creeping there.
    """
    covariance_diagonal = np.diag(cho_solve(state.factor, np.eye(len(precisions))))
    well_determined = 1.0 - precisions * covariance_diagonal
    squared = state.weights ** 2
    usable = (well_determined > 0) & (squared > well_determined * covariance_diagonal)
    proposal = np.full(len(precisions), MAX_PRECISION)
    proposal[usable] = well_determined[usable] / squared[usable]
    proposal = np.clip(proposal, MIN_PRECISION, MAX_PRECISION)
    proposal[0] = precisions[0]
    return proposal


@dataclass(frozen=True, eq=False)
class RvmModel(TrainedLearner):
    relevance_vectors: np.ndarray
    weights: np.ndarray
    bias: float
    kernel: KernelParams
    precisions: np.ndarray
    n_features: int
    threshold: float = DEFAULT_THRESHOLD
    bias_precision: float = 0.0
    converged: bool = True
    evidence_trace: tuple = field(default=())

    name = "rvm"

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"RVM threshold must lie in (0, 1), got {self.threshold}")
        object.__setattr__(self, "relevance_vectors",
                           np.asarray(self.relevance_vectors, dtype=float).reshape(-1, self.n_features))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).ravel())
        object.__setattr__(self, "precisions", np.asarray(self.precisions, dtype=float).ravel())

    @property
    def dimension(self) -> int:
        return self.n_features

    def score(self, x) -> np.ndarray:
        x = as_matrix(x, self.n_features)
        if len(self.weights) == 0:
            return np.full(len(x), self.bias)
        return rbf_matrix(x, self.relevance_vectors, self.kernel.gamma) @ self.weights + self.bias

    def probability(self, x) -> np.ndarray:
        return expit(self.score(x))

    def decide(self, x, threshold=None) -> np.ndarray:
        threshold = self.threshold if threshold is None else threshold
        if not 0 < threshold < 1:
            raise ValueError(f"RVM threshold must lie in (0, 1), got {threshold}")
        return np.where(self.probability(x) > threshold, POSITIVE, NEGATIVE)

    def with_threshold(self, threshold: float) -> "RvmModel":
        return RvmModel(
            self.relevance_vectors, self.weights, self.bias, self.kernel, self.precisions,
            self.n_features, threshold, self.bias_precision, self.converged, self.evidence_trace,
        )

    def to_record(self) -> dict:
        return {
            "n_features": self.n_features,
            "relevance_vectors": self.relevance_vectors.tolist(),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "gamma": self.kernel.gamma,
            "precisions": self.precisions.tolist(),
            "bias_precision": self.bias_precision,
            "threshold": self.threshold,
            "converged": self.converged,
        }

    @classmethod
    def from_record(cls, record: dict) -> "RvmModel":
        return cls(
            relevance_vectors=record["relevance_vectors"],
            weights=record["weights"],
            bias=float(record["bias"]),
            kernel=KernelParams(float(record["gamma"])),
            precisions=record["precisions"],
            n_features=int(record["n_features"]),
            threshold=float(record["threshold"]),
            bias_precision=float(record["bias_precision"]),
            converged=bool(record["converged"]),
        )


def train_rvm(train: Dataset, gamma: float, threshold: float = DEFAULT_THRESHOLD,
              config: RvmConfig = RvmConfig()) -> RvmModel:
    """ Type-II maximum likelihood fit of the RVM classifier

    Raises NumericalFailure when the training set is below
    `config.min_records` or the Laplace Hessian cannot be factorised.
    """
    require_both_classes(train, "RVM")
    if len(train) < config.min_records:
        raise NumericalFailure(f"RVM needs at least {config.min_records} records, got {len(train)}")
    kernel = KernelParams(gamma)
    n = len(train)
    design = np.hstack([np.ones((n, 1)), rbf_matrix(train.features, train.features, kernel.gamma)])
    targets = (train.labels == POSITIVE).astype(float)

    # Column 0 is the bias: never pruned, precision held at BIAS_PRECISION.
    active = np.arange(n + 1)
    precisions = np.full(n + 1, config.initial_precision)
    precisions[0] = BIAS_PRECISION
    state = _laplace(design, targets, precisions, np.zeros(n + 1), config)
    trace = [state.log_evidence]
    converged = False

    for iteration in range(config.max_iterations):
        proposal = _precision_proposal(state, precisions)
        accepted = None
        for attempt in range(MAX_DAMPING_STEPS + 1):
            fraction = 0.5 ** attempt
            candidate = np.exp(np.log(precisions) + fraction * (np.log(proposal) - np.log(precisions)))
            candidate_state = _laplace(design[:, active], targets, candidate, state.weights, config)
            if candidate_state.log_evidence >= state.log_evidence - EVIDENCE_SLACK:
                accepted = candidate
                break
        if accepted is None:
            logger.debug("No evidence-improving precision update at iteration %d", iteration)
            converged = True
            break

        tracked = (accepted < PRUNE_PRECISION) & (precisions < PRUNE_PRECISION)
        change = np.max(np.abs(np.log(accepted[tracked]) - np.log(precisions[tracked]))) if tracked.any() else 0.0
        precisions, state = accepted, candidate_state

        keep = precisions < config.prune_precision
        keep[0] = True
        if not keep.all():
            active, precisions = active[keep], precisions[keep]
            state = _laplace(design[:, active], targets, precisions, state.weights[keep], config)
        trace.append(state.log_evidence)
        if change < config.tolerance:
            converged = True
            break
    else:
        logger.warning("RVM reached %d outer iterations without converging", config.max_iterations)

    relevant = active[1:] - 1
    logger.debug("RVM gamma=%s kept %d of %d relevance vectors", gamma, len(relevant), n)
    return RvmModel(
        relevance_vectors=train.features[relevant],
        weights=state.weights[1:],
        bias=float(state.weights[0]),
        kernel=kernel,
        precisions=precisions[1:],
        n_features=train.dimension,
        threshold=threshold,
        bias_precision=float(precisions[0]),
        converged=converged,
        evidence_trace=tuple(trace),
    )


def rvm_probability(model: RvmModel, x) -> np.ndarray:
    return model.probability(x)


def rvm_predict(model: RvmModel, x, threshold: float = None) -> np.ndarray:
    """ +1 where the probability strictly exceeds the threshold (the model's own by default) """
    return model.decide(x, threshold)
