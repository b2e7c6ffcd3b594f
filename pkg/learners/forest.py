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
Random forest of Gini-split decision trees.

Each tree is grown on a bootstrap sample and on its own random subset of
the features. The records a tree never saw give the out-of-bag (OOB)
error curve used to decide how many trees are worth keeping.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from learners.base import TrainedLearner, as_matrix, require_both_classes, sign_labels
from utils.dataset import NEGATIVE, POSITIVE, Dataset
from utils.errors import InvalidDistribution
from utils.modelsel import kfold_split

logger = logging.getLogger(__name__)

# A split must lower the weighted impurity by more than this to count.
MIN_IMPURITY_DECREASE = 1e-12
# OOB error usually levels out by about this many trees.
DEFAULT_TREE_CAP = 120


@dataclass(frozen=True)
class Leaf:
    decision: int
    positive_fraction: float
    negative_fraction: float

    @property
    def class_fractions(self) -> tuple:
        return (self.positive_fraction, self.negative_fraction)


@dataclass(frozen=True)
class Split:
    """ Records with x[feature] <= threshold go left """
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Split, Leaf]


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    impurity_decrease: float


@dataclass(frozen=True)
class ForestConfig:
    max_depth: int = 16
    min_node_size: int = 2
    # None means ceil(sqrt(d)) features per tree.
    features_per_tree: Optional[int] = None
    min_trees: int = 20
    flat_window: int = 20
    flat_tolerance: float = 0.0025
    tree_cap: Optional[int] = DEFAULT_TREE_CAP
    n_jobs: int = 1

    def tree_feature_count(self, dimension: int) -> int:
        if self.features_per_tree is None:
            return max(1, math.ceil(math.sqrt(dimension)))
        return max(1, min(dimension, self.features_per_tree))


def gini(class_fractions: Sequence[float]) -> float:
    """ Gini impurity 1 - sum(p_c^2) of a class distribution """
    fractions = np.asarray(class_fractions, dtype=float)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise InvalidDistribution(f"Not a probability distribution: {tuple(fractions)}")
    return float(1.0 - np.sum(fractions ** 2))


def _gini_from_counts(positives: np.ndarray, totals: np.ndarray) -> np.ndarray:
    p = positives / totals
    return 1.0 - p ** 2 - (1.0 - p) ** 2


def best_split(features: np.ndarray, labels: np.ndarray, candidate_features) -> Optional[SplitCandidate]:
    """ Finds the midpoint threshold minimising the size-weighted child Gini impurity

    Ties go to the lowest feature index, then the lowest threshold. Returns
    None when no threshold strictly lowers the impurity.
    """
    n = len(labels)
    if n < 2:
        return None
    positive = labels == POSITIVE
    total_positive = int(positive.sum())
    if total_positive in (0, n):
        return None
    parent = float(_gini_from_counts(np.array(total_positive), np.array(n)))
    left_sizes = np.arange(1, n)
    right_sizes = n - left_sizes

    best, best_weighted = None, parent - MIN_IMPURITY_DECREASE
    for feature in sorted(int(f) for f in candidate_features):
        order = np.argsort(features[:, feature], kind="stable")
        values = features[order, feature]
        distinct = values[1:] > values[:-1]
        if not distinct.any():
            continue
        left_positive = np.cumsum(positive[order])[:-1]
        weighted = (
            left_sizes * _gini_from_counts(left_positive, left_sizes)
            + right_sizes * _gini_from_counts(total_positive - left_positive, right_sizes)
        ) / n
        weighted[~distinct] = np.inf
        i = int(np.argmin(weighted))
        if weighted[i] < best_weighted:
            best_weighted = float(weighted[i])
            threshold = float(values[i] + (values[i + 1] - values[i]) / 2.0)
            best = SplitCandidate(feature, threshold, parent - best_weighted)
    return best


def _leaf(labels: np.ndarray) -> Leaf:
    positive_fraction = float(np.mean(labels == POSITIVE))
    decision = POSITIVE if positive_fraction > 0.5 else NEGATIVE
    return Leaf(decision, positive_fraction, 1.0 - positive_fraction)


def grow_tree(features: np.ndarray, labels: np.ndarray, candidate_features,
              config: ForestConfig, depth: int = 0) -> TreeNode:
    """ Grows a tree until purity, `max_depth`, or nodes below `min_node_size` """
    if depth >= config.max_depth or len(labels) < config.min_node_size:
        return _leaf(labels)
    split = best_split(features, labels, candidate_features)
    if split is None:
        return _leaf(labels)
    goes_left = features[:, split.feature] <= split.threshold
    return Split(
        split.feature,
        split.threshold,
        grow_tree(features[goes_left], labels[goes_left], candidate_features, config, depth + 1),
        grow_tree(features[~goes_left], labels[~goes_left], candidate_features, config, depth + 1),
    )


def tree_decide(root: TreeNode, features: np.ndarray) -> np.ndarray:
    decisions = np.empty(len(features), dtype=np.int64)
    pending = [(root, np.arange(len(features)))]
    while pending:
        node, rows = pending.pop()
        if isinstance(node, Leaf):
            decisions[rows] = node.decision
            continue
        goes_left = features[rows, node.feature] <= node.threshold
        pending.append((node.left, rows[goes_left]))
        pending.append((node.right, rows[~goes_left]))
    return decisions


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def _node_to_record(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {
            "decision": node.decision,
            "positive_fraction": node.positive_fraction,
            "negative_fraction": node.negative_fraction,
        }
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_record(node.left),
        "right": _node_to_record(node.right),
    }


def _node_from_record(record: dict) -> TreeNode:
    if "decision" in record:
        return Leaf(int(record["decision"]), float(record["positive_fraction"]), float(record["negative_fraction"]))
    return Split(
        int(record["feature"]),
        float(record["threshold"]),
        _node_from_record(record["left"]),
        _node_from_record(record["right"]),
    )


@dataclass(frozen=True, eq=False)
class ForestModel(TrainedLearner):
    trees: tuple
    in_bag: tuple
    feature_subsets: tuple
    n_features: int
    oob_curve: tuple = field(default=())

    name = "forest"

    def __post_init__(self):
        if len(self.trees) < 1:
            raise ValueError("A forest needs at least one tree")
        if len(self.in_bag) != len(self.trees):
            raise ValueError("Every tree needs its in-bag record set")

    @property
    def dimension(self) -> int:
        return self.n_features

    def tree_votes(self, features: np.ndarray) -> np.ndarray:
        """ Matrix of per-tree decisions, one row per tree """
        features = as_matrix(features, self.n_features)
        return np.stack([tree_decide(tree, features) for tree in self.trees])

    def decide(self, x) -> np.ndarray:
        return sign_labels(self.tree_votes(x).sum(axis=0))

    def to_record(self) -> dict:
        return {
            "n_features": self.n_features,
            "trees": [_node_to_record(tree) for tree in self.trees],
            "in_bag": [list(map(int, bag)) for bag in self.in_bag],
            "feature_subsets": [list(map(int, subset)) for subset in self.feature_subsets],
            "oob_curve": list(self.oob_curve),
        }

    @classmethod
    def from_record(cls, record: dict) -> "ForestModel":
        return cls(
            trees=tuple(_node_from_record(tree) for tree in record["trees"]),
            in_bag=tuple(np.asarray(bag, dtype=np.int64) for bag in record["in_bag"]),
            feature_subsets=tuple(tuple(subset) for subset in record["feature_subsets"]),
            n_features=int(record["n_features"]),
            oob_curve=tuple(float(e) for e in record["oob_curve"]),
        )


def _grow_member(features, labels, seed_sequence, config: ForestConfig):
    rng = np.random.default_rng(seed_sequence)
    n, d = features.shape
    draws = rng.integers(0, n, size=n)
    subset = tuple(int(f) for f in np.sort(rng.choice(d, size=config.tree_feature_count(d), replace=False)))
    root = grow_tree(features[draws], labels[draws], subset, config)
    return root, np.unique(draws), subset


def train_forest(train: Dataset, max_trees: int = 200, seed: int = 0,
                 config: ForestConfig = ForestConfig()) -> ForestModel:
    """ Grows `max_trees` trees and records the OOB error after each one

    Tree seeds are spawned from `seed`, so parallel growth (`config.n_jobs`)
    gives the same forest as sequential growth.
    """
    require_both_classes(train, "Random forest")
    if max_trees < 1:
        raise ValueError("max_trees must be positive")
    seeds = np.random.SeedSequence(seed).spawn(max_trees)
    if config.n_jobs == 1:
        grown = [_grow_member(train.features, train.labels, s, config) for s in seeds]
    else:
        grown = Parallel(n_jobs=config.n_jobs)(
            delayed(_grow_member)(train.features, train.labels, s, config) for s in seeds
        )
    model = ForestModel(
        trees=tuple(g[0] for g in grown),
        in_bag=tuple(g[1] for g in grown),
        feature_subsets=tuple(g[2] for g in grown),
        n_features=train.dimension,
    )
    curve = oob_error(model, train)
    logger.debug("Grew %d trees, final OOB error %.4f", max_trees, curve[-1])
    return replace(model, oob_curve=tuple(curve))


def forest_decide(model: ForestModel, x) -> np.ndarray:
    return model.decide(x)


def _prefix_errors(votes: np.ndarray, counted: np.ndarray, labels: np.ndarray) -> np.ndarray:
    cumulative_votes = np.cumsum(votes * counted, axis=0)
    cumulative_counts = np.cumsum(counted, axis=0)
    errors = np.empty(len(votes))
    for t in range(len(votes)):
        voted = cumulative_counts[t] > 0
        if not voted.any():
            # Nobody has a vote yet, which is no better than a coin flip.
            errors[t] = 0.5
            continue
        predictions = sign_labels(cumulative_votes[t, voted])
        errors[t] = float(np.mean(predictions != labels[voted]))
    return errors


def oob_error(model: ForestModel, train: Dataset) -> np.ndarray:
    """ OOB error after the first t trees, for t = 1..m

    A record votes only through trees whose bootstrap sample excluded it,
    and records without such a tree yet are left out of that entry.
    """
    votes = model.tree_votes(train.features)
    out_of_bag = np.ones(votes.shape, dtype=bool)
    for t, bag in enumerate(model.in_bag):
        out_of_bag[t, np.asarray(bag, dtype=np.int64)] = False
    return _prefix_errors(votes, out_of_bag, train.labels)


def prefix_error_curve(model: ForestModel, data: Dataset) -> np.ndarray:
    """ Error on `data` after the first t trees, for t = 1..m """
    votes = model.tree_votes(data.features)
    return _prefix_errors(votes, np.ones(votes.shape, dtype=bool), data.labels)


def select_tree_count(oob_curve, min_trees: int = 20, window: int = 20, tolerance: float = 0.0025,
                      cap: Optional[int] = DEFAULT_TREE_CAP) -> int:
    """ First tree count after which the next `window` trees improve the OOB error by less than `tolerance`

    A curve that never levels out selects its full length, or `cap` trees
    when the curve is longer.
    """
    curve = np.asarray(oob_curve, dtype=float)
    limit = len(curve) if cap is None else min(len(curve), max(1, cap))
    for t in range(max(1, min_trees), min(limit, len(curve) - window) + 1):
        if curve[t - 1] - curve[t:t + window].min() < tolerance:
            return t
    return limit


def truncate(model: ForestModel, trees: int) -> ForestModel:
    """ Keeps the first `trees` trees """
    trees = max(1, min(trees, len(model.trees)))
    return ForestModel(
        trees=model.trees[:trees],
        in_bag=model.in_bag[:trees],
        feature_subsets=model.feature_subsets[:trees],
        n_features=model.n_features,
        oob_curve=model.oob_curve[:trees],
    )


def forest_cv_curve(train: Dataset, max_trees: int = 200, folds: int = 5, seed: int = 0,
                    config: ForestConfig = ForestConfig()) -> np.ndarray:
    """ k-fold cross-validated error after the first t trees, averaged over folds """
    plan = kfold_split(len(train), folds, seed)
    curves = []
    for held_out in plan.folds:
        rest = np.setdiff1d(np.arange(len(train)), held_out)
        complement = train.subset(rest)
        if not complement.has_both_classes():
            logger.warning("Skipping single-class fold in the forest CV curve")
            continue
        model = train_forest(complement, max_trees, seed, config)
        curves.append(prefix_error_curve(model, train.subset(held_out)))
    if not curves:
        raise ValueError("Every cross-validation fold was single-class")
    return np.mean(curves, axis=0)


def export_oob_csv(oob_curve, path) -> None:
    curve = list(oob_curve)
    pd.DataFrame({"trees": range(1, len(curve) + 1), "oob_error": curve}).to_csv(path, index=False)
