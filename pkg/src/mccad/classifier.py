"""Randomized decision-tree ensembles and the cascade model file.

Trees are grown with scikit-learn's extra-trees splitter (random feature
subset of size K, one uniform random threshold per candidate feature, best
Gini gain, no bootstrap) and then copied into plain arrays; prediction,
serialization and validation are done here without scikit-learn.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            internal = f >= 0
            active, nd, f = active[internal], nd[internal], f[internal]
            if not active.size:
                break
            go_left = X[active, f] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def to_json(self) -> list[dict]:
        out = []
        for i in range(len(self.feature)):
            if self.feature[i] < 0:
                out.append({"leaf": float(self.value[i])})
            else:
                out.append({"f": int(self.feature[i]), "t": float(self.threshold[i]),
                            "l": int(self.left[i]), "r": int(self.right[i])})
        return out

    @classmethod
    def from_json(cls, nodes, n_features: int) -> "Tree":
        if not isinstance(nodes, list) or not nodes:
            raise ModelFormatError("tree must be a non-empty node list")
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        for i, nd in enumerate(nodes):
            if not isinstance(nd, dict):
                raise ModelFormatError(f"node {i} is not an object")
            if "leaf" in nd:
                v = float(nd["leaf"])
                if not 0.0 <= v <= 1.0:
                    raise ModelFormatError(f"leaf value {v} outside [0, 1]")
                value[i] = v
            else:
                try:
                    feature[i], threshold[i] = int(nd["f"]), float(nd["t"])
                    left[i], right[i] = int(nd["l"]), int(nd["r"])
                except (KeyError, TypeError, ValueError):
                    raise ModelFormatError(f"node {i} is malformed") from None
                if not 0 <= feature[i] < n_features:
                    raise ModelFormatError(f"node {i} references feature {feature[i]}")
                if not math.isfinite(threshold[i]):
                    raise ModelFormatError(f"node {i} has a non-finite threshold")
        tree = cls(feature, threshold, left, right, value)
        tree.validate()
        return tree

    def validate(self) -> None:
        """Every node reachable once from the root; every path ends in a leaf."""
        n = len(self.feature)
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        while stack:
            i = stack.pop()
            if not 0 <= i < n:
                raise ModelFormatError(f"child index {i} out of range")
            if seen[i]:
                raise ModelFormatError("tree has a cycle or shared node")
            seen[i] = True
            if self.feature[i] >= 0:
                stack.extend((int(self.left[i]), int(self.right[i])))
        if not seen.all():
            raise ModelFormatError("tree has unreachable nodes")


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    # None: ceil(sqrt(n_features))
    max_features: int | None = None
    min_samples_leaf: int = 5


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    feature_names: tuple[str, ...] = ()
    stage: int = 0
    threshold: float = 0.5

    def predict_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite feature value")
        if X.shape[0] == 0:
            return np.zeros(0)
        # the trees were fitted on float32-cast features
        X = X.astype(np.float32).astype(np.float64)
        acc = np.zeros(X.shape[0])
        for t in self.trees:
            acc += t.predict(X)
        return np.clip(acc / len(self.trees), 0.0, 1.0)

    def to_json(self) -> dict:
        return {"stage": self.stage, "threshold": float(self.threshold),
                "n_features": self.n_features, "feature_names": list(self.feature_names),
                "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, d) -> "Forest":
        try:
            names = tuple(d["feature_names"])
            n_features = int(d.get("n_features", len(names)))
            trees = [Tree.from_json(t, n_features) for t in d["trees"]]
            return cls(trees, n_features, names, int(d["stage"]), float(d["threshold"]))
        except (KeyError, TypeError) as e:
            raise ModelFormatError(f"malformed stage: {e}") from None


def predict(forest: Forest, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {x.size}")
    return float(forest.predict_batch(x[None])[0])


def keep_mask(probs, threshold: float) -> np.ndarray:
    """Survivors of a stage: ``prob >= threshold``; a threshold of 1 or more rejects all."""
    probs = np.asarray(probs)
    if threshold >= 1.0:
        return np.zeros(probs.shape, dtype=bool)
    return probs >= threshold


def sensitivity_threshold(pos_scores, target: float) -> float:
    """Largest threshold keeping at least ``target`` of the positive scores."""
    s = np.sort(np.asarray(pos_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("no positive scores")
    if not 0.0 < target <= 1.0:
        raise ValueError("target sensitivity must be in (0, 1]")
    k = int(math.floor((1.0 - target) * s.size + 1e-9))
    t = float(s[min(k, s.size - 1)])
    return min(t, math.nextafter(1.0, 0.0))


def train_forest(X, y, cfg: ForestConfig | None = None, seed: int = 0,
                 feature_names=(), stage: int = 0) -> Forest:
    from sklearn.ensemble import ExtraTreesClassifier

    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value in training data")
    if set(np.unique(y).tolist()) != {0, 1}:
        raise ValueError("training needs at least one sample of each class (labels 0/1)")
    k = cfg.max_features or int(math.ceil(math.sqrt(X.shape[1])))
    est = ExtraTreesClassifier(n_estimators=cfg.n_trees, criterion="gini", max_features=k,
                               min_samples_leaf=cfg.min_samples_leaf, bootstrap=False,
                               random_state=int(seed) % (2 ** 32), n_jobs=1)
    est.fit(X, y)
    pos = list(est.classes_).index(1)
    trees = []
    for e in est.estimators_:
        t = e.tree_
        leaf = t.children_left == -1
        val = t.value[:, 0, :]
        frac = val[:, pos] / val.sum(axis=1)
        trees.append(Tree(
            feature=np.where(leaf, -1, t.feature).astype(np.int64),
            threshold=np.where(leaf, 0.0, t.threshold).astype(np.float64),
            left=np.where(leaf, -1, t.children_left).astype(np.int64),
            right=np.where(leaf, -1, t.children_right).astype(np.int64),
            value=np.clip(frac, 0.0, 1.0).astype(np.float64)))
    names = tuple(feature_names) or tuple(f"f{i}" for i in range(X.shape[1]))
    return Forest(trees, X.shape[1], names, stage)


@dataclass
class CascadeModel:
    stage1: Forest
    stage2: Forest
    stage3: Forest
    params: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def stages(self) -> list[Forest]:
        return [self.stage1, self.stage2, self.stage3]

    def to_json(self) -> dict:
        return {"format_version": self.format_version, "params": self.params,
                "stages": [s.to_json() for s in self.stages]}


def save_model(model: CascadeModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def load_model(path) -> CascadeModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"model file is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must hold a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported version {version!r}; expected {FORMAT_VERSION}")
    stages = doc.get("stages")
    if not isinstance(stages, list) or len(stages) != 3:
        raise ModelFormatError("model must have exactly three stages")
    forests = [Forest.from_json(s) for s in stages]
    for i, f in enumerate(forests, 1):
        if f.stage != i:
            raise ModelFormatError(f"stage {i} is labelled {f.stage}")
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ModelFormatError("params must be an object")
    return CascadeModel(*forests, params=params, format_version=version)
