"""Gini decision trees and bagged forests for lane-change classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FEATURES = 42
KINDS = ("cumulative", "exact")
HORIZONS = tuple(range(16))


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    feature_subset_size: int = math.ceil(math.sqrt(N_FEATURES))
    min_samples_leaf: int = 2
    seed: int = 0


def gini(pos: float, n: float) -> float:
    if n == 0:
        return 0.0
    p = pos / n
    return 2.0 * p * (1.0 - p)


def best_split_on_feature(values: np.ndarray, labels: np.ndarray, min_leaf: int = 1):
    """Best Gini split of one feature column.

    Returns ``(weighted_child_impurity_times_n, threshold)`` for the lowest
    achievable child impurity, or ``None`` if no admissible threshold exists.
    Candidate thresholds are midpoints of consecutive distinct sorted values;
    among equal scores the lowest threshold wins.
    """
    order = np.argsort(values, kind="stable")
    xs = values[order]
    ys = labels[order]
    n = xs.size
    cpos = np.cumsum(ys)
    n_left = np.arange(1, n)
    pos_left = cpos[:-1]
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    n_right = n - n_left
    pos_right = cpos[-1] - pos_left
    # n * gini = 2 * pos * (n - pos) / n for each side
    score = (2.0 * pos_left * (n_left - pos_left) / n_left
             + 2.0 * pos_right * (n_right - pos_right) / n_right)
    score = np.where(valid, score, np.inf)
    j = int(np.argmin(score))
    return float(score[j]), 0.5 * (xs[j] + xs[j + 1])


@dataclass
class DecisionTree:
    """Binary tree stored as flat node arrays; ``feature == -1`` marks leaves."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prob: np.ndarray  # positive-class probability at each node
    n_samples: np.ndarray
    gain: np.ndarray  # weighted impurity decrease of each split (0 at leaves)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.prob[node]

    def importances(self, n_features: int = N_FEATURES) -> np.ndarray:
        imp = np.zeros(n_features)
        split = self.feature >= 0
        np.add.at(imp, self.feature[split], self.gain[split])
        return imp

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "prob", "n_samples", "gain")}

    @classmethod
    def from_dict(cls, d) -> "DecisionTree":
        ints = {"feature", "left", "right", "n_samples"}
        return cls(**{k: np.array(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})


def train_tree(X: np.ndarray, y: np.ndarray, max_depth: int = 12, feature_subset_size: int | None = None,
               rng: np.random.Generator | None = None, min_samples_leaf: int = 2) -> DecisionTree:
    """Grow a tree greedily on Gini impurity.

    At each node a random permutation of features is drawn and the first
    ``feature_subset_size`` are searched; if none of them admits a split the
    scan continues down the permutation.  Ties keep the earliest feature in
    ascending index order among those searched.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n_features = X.shape[1]
    m = n_features if feature_subset_size is None else min(feature_subset_size, n_features)
    rng = rng or np.random.default_rng(0)

    feature, threshold, left, right, prob, count, gain = [], [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        prob.append(float(y[idx].mean()) if idx.size else 0.0)
        count.append(int(idx.size))
        gain.append(0.0)
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        n = idx.size
        pos = int(y[idx].sum())
        if depth >= max_depth or pos == 0 or pos == n or n < 2 * min_samples_leaf:
            continue
        perm = rng.permutation(n_features)
        best = None
        searched = 0
        for start in range(0, n_features, m):
            block = np.sort(perm[start:start + m])
            for f in block:
                res = best_split_on_feature(X[idx, f], y[idx], min_samples_leaf)
                if res is not None and (best is None or res[0] < best[0]):
                    best = (res[0], res[1], int(f))
            searched += len(block)
            if best is not None:
                break
        if best is None:
            continue
        score, thr, f = best
        go_left = X[idx, f] < thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = thr
        gain[node] = n * gini(pos, n) - score
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is numbered depth-first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(prob), np.array(count, dtype=np.int64), np.array(gain))


@dataclass
class Forest:
    trees: list[DecisionTree]
    kind: str = "cumulative"
    t: int = 0
    config: ForestConfig = field(default_factory=ForestConfig)
    importances: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    oob_accuracy: float | None = None
    n_train: int = 0

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.mean([tree.predict_proba(X) for tree in self.trees], axis=0)

    def save(self, path) -> None:
        doc = {
            "kind": self.kind, "t": self.t, "config": self.config.__dict__,
            "importances": self.importances.tolist(), "oob_accuracy": self.oob_accuracy,
            "n_train": self.n_train, "trees": [tr.to_dict() for tr in self.trees],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Forest":
        doc = json.loads(Path(path).read_text())
        return cls([DecisionTree.from_dict(t) for t in doc["trees"]], doc["kind"], doc["t"],
                   ForestConfig(**doc["config"]), np.array(doc["importances"]),
                   doc["oob_accuracy"], doc["n_train"])


def train_forest(X, y, kind: str = "cumulative", t: int = 0, cfg: ForestConfig | None = None) -> Forest:
    """Bag ``cfg.n_trees`` trees on bootstrap resamples.

    Each tree draws its bootstrap and feature subsets from a generator seeded
    by ``(cfg.seed, tree index)``.  Importances are the impurity decreases
    summed over all trees and normalized to one.
    """
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError(f"no training samples for ({kind}, t={t})")
    trees = []
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n)
    for k in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, k])
        boot = rng.integers(0, n, size=n)
        tree = train_tree(X[boot], y[boot], cfg.max_depth, cfg.feature_subset_size, rng,
                          cfg.min_samples_leaf)
        trees.append(tree)
        oob = np.ones(n, dtype=bool)
        oob[boot] = False
        if oob.any():
            oob_sum[oob] += tree.predict_proba(X[oob])
            oob_cnt[oob] += 1
    imp = np.sum([tr.importances(X.shape[1]) for tr in trees], axis=0)
    total = imp.sum()
    if total > 0:
        imp = imp / total
    seen = oob_cnt > 0
    oob_acc = None
    if seen.any():
        oob_pred = (oob_sum[seen] / oob_cnt[seen]) >= 0.5
        oob_acc = float(np.mean(oob_pred == y[seen].astype(bool)))
    return Forest(trees, kind, t, cfg, imp, oob_acc, n)


def predict_lc(forest: Forest, features) -> tuple[float, bool]:
    """Mean positive-class probability and the decision ``p >= 0.5``."""
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} features, got {features.shape[-1]}")
    p = float(forest.predict_proba(features[None, :])[0])
    return p, p >= 0.5


# -- importance grouping -----------------------------------------------------

CHANNELS = ("longitudinal position", "lateral position", "longitudinal velocity",
            "lateral velocity", "longitudinal acceleration", "lateral acceleration")
# blocks follow the feature order l, l1, l2, f, f1, f2, central
VEHICLE_GROUPS = {"central": (6,), "on-ramp neighbors": (0, 3), "adjacent-lane neighbors": (1, 2, 4, 5)}


def importance_report(forest_or_scores) -> dict[str, dict[str, float]]:
    """Group the 42 importances by kinematic channel and by vehicle group."""
    imp = getattr(forest_or_scores, "importances", forest_or_scores)
    blocks = np.asarray(imp, dtype=float).reshape(7, 6)
    by_channel = {name: float(blocks[:, c].sum()) for c, name in enumerate(CHANNELS)}
    by_vehicle = {name: float(blocks[list(rows), :].sum()) for name, rows in VEHICLE_GROUPS.items()}
    return {"channel": by_channel, "vehicle": by_vehicle}
