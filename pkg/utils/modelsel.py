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
k-fold splitting and the cross-validated kernel-width search shared by
the SVM and the RVM.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from learners.base import TrainedLearner
from utils.committee import error_rate
from utils.dataset import Dataset
from utils.errors import DegenerateFold, InvalidK

logger = logging.getLogger(__name__)

GAMMA_GRID = (0.5, 1.0, 2.0, 4.0)
DEFAULT_FOLDS = 5

Trainer = Callable[[Dataset, float], TrainedLearner]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    n: int
    seed: int

    def complement(self, fold: int) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), self.folds[fold])


def kfold_split(n: int, k: int, seed: int) -> FoldPlan:
    """ Deals a seeded permutation of 0..n-1 round-robin into k folds """
    if not 2 <= k <= n:
        raise InvalidK(f"Need 2 <= k <= n for k-fold splitting, got k={k}, n={n}")
    permutation = np.random.default_rng(seed).permutation(n)
    return FoldPlan(tuple(np.sort(permutation[j::k]) for j in range(k)), n, seed)


@dataclass(frozen=True)
class GridResult:
    grid: tuple
    mean_errors: tuple
    chosen: float
    skipped_folds: tuple = ()
    frequency: Optional[dict] = None

    @property
    def best_error(self) -> float:
        return min(self.mean_errors)


def _fold_error(trainer: Trainer, train: Dataset, gamma: float, plan: FoldPlan, fold: int) -> float:
    model = trainer(train.subset(plan.complement(fold)), gamma)
    held_out = train.subset(plan.folds[fold])
    return error_rate(model.decide(held_out.features), held_out.labels)


def grid_search_gamma(trainer: Trainer, train: Dataset, grid: Sequence[float] = GAMMA_GRID,
                      folds: int = DEFAULT_FOLDS, seed: int = 0, n_jobs: int = 1) -> GridResult:
    """ Picks the gamma with the lowest mean held-out error, the smaller gamma on ties

    Folds whose training complement holds a single class are skipped with
    a warning; DegenerateFold is raised when no fold is usable.
    """
    grid = tuple(float(g) for g in grid)
    if not grid:
        raise ValueError("The gamma grid is empty")
    plan = kfold_split(len(train), folds, seed)
    usable, skipped = [], []
    for fold in range(folds):
        if train.subset(plan.complement(fold)).has_both_classes():
            usable.append(fold)
        else:
            logger.warning("Skipping fold %d of %d: its training complement holds one class", fold, folds)
            skipped.append(fold)
    if not usable:
        raise DegenerateFold("Every cross-validation fold has a single-class complement")

    jobs = [(gamma, fold) for gamma in grid for fold in usable]
    if n_jobs == 1:
        errors = [_fold_error(trainer, train, gamma, plan, fold) for gamma, fold in jobs]
    else:
        errors = Parallel(n_jobs=n_jobs)(
            delayed(_fold_error)(trainer, train, gamma, plan, fold) for gamma, fold in jobs
        )
    errors = np.asarray(errors).reshape(len(grid), len(usable))
    means = tuple(float(e) for e in errors.mean(axis=1))
    best = min(means)
    chosen = min(g for g, e in zip(grid, means) if e == best)
    logger.debug("Gamma grid %s gave mean CV errors %s, chose %s", grid, means, chosen)
    return GridResult(grid, means, chosen, tuple(skipped))


def gamma_selection_frequency(trainer: Trainer, train: Dataset, grid: Sequence[float] = GAMMA_GRID,
                              folds: int = DEFAULT_FOLDS, seeds: Sequence[int] = range(10)) -> dict:
    """ Fraction of repeated, differently seeded grid searches choosing each gamma """
    grid = tuple(float(g) for g in grid)
    seeds = list(seeds)
    counts = dict.fromkeys(grid, 0)
    for seed in seeds:
        counts[grid_search_gamma(trainer, train, grid, folds, seed).chosen] += 1
    return {gamma: count / len(seeds) for gamma, count in counts.items()}


def export_grid_csv(result: GridResult, path) -> None:
    pd.DataFrame({
        "gamma": result.grid,
        "mean_cv_error": result.mean_errors,
        "chosen": [g == result.chosen for g in result.grid],
    }).to_csv(path, index=False)
