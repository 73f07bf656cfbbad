"""Random forests of Gini-split decision trees over code vectors.

Each tree is grown on a bootstrap sample and considers ``floor(sqrt(K))``
randomly drawn non-constant features per node. Trees are stored as flat node
arrays; the forest predicts by averaging leaf class distributions.

Tree ``i`` draws from ``numpy.random.default_rng([seed, i])``, so a forest of
``n`` trees is exactly the first ``n`` trees of any larger forest with the
same seed; :func:`select_n_trees` relies on this.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from escgan import kernels

MAGIC = b"RFST"
VERSION = 1
GAIN_TOL = 1e-12
LEAF = -1


class ShapeError(ValueError):
    pass


def gini_counts(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        raise ValueError("gini of an empty node is undefined")
    p = counts / n
    return float(1.0 - np.sum(p * p))


def gini(labels: Sequence) -> float:
    """1 - sum p_i^2 over the label multiset."""
    labels = list(labels)
    if not labels:
        raise ValueError("gini of an empty node is undefined")
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return gini_counts(counts)


@dataclass
class Split:
    feature: int
    threshold: float
    gain: float


def best_split(X: np.ndarray, y: np.ndarray, features: Optional[Sequence[int]] = None,
               n_classes: Optional[int] = None, min_leaf: int = 1) -> Optional[Split]:
    """Exhaustive Gini-gain scan; ``y`` holds class indices 0..n_classes-1.

    Thresholds are midpoints between consecutive distinct sorted values and a
    sample goes left when ``x <= threshold``. Ties go to the lower feature
    index, then the lower threshold. Returns None when no split has positive
    gain.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n < 2:
        return None
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    features = range(X.shape[1]) if features is None else sorted(int(f) for f in features)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    parent = float(np.sum(counts * counts)) / n  # n * (1 - gini)
    best: Optional[Split] = None
    best_score = -math.inf
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = np.ascontiguousarray(X[order, f])
        ys = np.ascontiguousarray(y[order])
        pos, score = kernels.gini_split_scan(xs, ys, n_classes, min_leaf)
        if pos < 0:
            continue
        if score > best_score + GAIN_TOL * n:
            best_score = score
            best = Split(f, 0.5 * (xs[pos - 1] + xs[pos]), 0.0)
    if best is None:
        return None
    best.gain = (best_score - parent) / n
    if best.gain <= GAIN_TOL:
        return None
    return best


# -- trees ------------------------------------------------------------------------------------

@dataclass
class Tree:
    feature: np.ndarray    # int32, LEAF for leaves
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    value: np.ndarray      # (n_nodes, n_classes) class distribution

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int, min_split: int,
              n_features_split: int, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(np.bincount(y[idx], minlength=n_classes) / idx.size)
        return len(feature) - 1

    stack = [(new_node(np.arange(X.shape[0])), np.arange(X.shape[0]), 0)]
    n_total = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.size < min_split or np.all(y[idx] == y[idx[0]]):
            continue
        sub = X[idx]
        # draw features in random order until enough non-constant ones are found
        chosen = []
        for f in rng.permutation(n_total):
            col = sub[:, f]
            if col.max() > col.min():
                chosen.append(int(f))
                if len(chosen) == n_features_split:
                    break
        if not chosen:
            continue
        split = best_split(sub, y[idx], chosen, n_classes)
        if split is None:
            continue
        mask = sub[:, split.feature] <= split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        li, ri = idx[mask], idx[~mask]
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int32), np.array(right, dtype=np.int32),
                np.array(value, dtype=np.float64).reshape(-1, n_classes))


# -- forests ----------------------------------------------------------------------------------

@dataclass
class ForestParams:
    n_trees: int = 500
    max_depth: int = 32
    min_split_fraction: float = 0.02
    min_split: Optional[int] = None  # overrides the class-size rule when set
    features_per_split: Optional[int] = None  # floor(sqrt(K)) when unset
    seed: int = 0
    allow_shallow: bool = False  # permit depths outside 16..64 (small tests)

    def validate(self) -> "ForestParams":
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if not self.allow_shallow and not 16 <= self.max_depth <= 64:
            raise ValueError("max_depth must lie in [16, 64] (set allow_shallow to override)")
        if not 0 <= self.min_split_fraction < 1:
            raise ValueError("min_split_fraction must be in [0, 1)")
        return self


@dataclass
class Forest:
    trees: list
    classes: np.ndarray
    n_features: int
    params: ForestParams
    oob: list = field(default_factory=list)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def predict_proba(self, X, n_trees: Optional[int] = None) -> np.ndarray:
        X = self._check(X)
        trees = self.trees[:n_trees] if n_trees else self.trees
        acc = np.zeros((X.shape[0], self.classes.size))
        for t in trees:
            acc += t.predict_proba(X)
        return acc / len(trees)

    def predict(self, X, n_trees: Optional[int] = None) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lower class index
        return self.classes[np.argmax(self.predict_proba(X, n_trees), axis=1)]

    def predict_one(self, x) -> tuple:
        p = self.predict_proba(x)[0]
        return self.classes[int(np.argmax(p))], p


def min_split_count(y_idx: np.ndarray, n_classes: int, fraction: float) -> int:
    counts = np.bincount(y_idx, minlength=n_classes)
    counts = counts[counts > 0]
    return max(2, int(math.ceil(fraction * counts.min())))


def fit(X, y, params: Optional[ForestParams] = None) -> Forest:
    params = (params or ForestParams()).validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ShapeError("X must be (n_samples, n_features) with one label per row")
    classes, y_idx = np.unique(y, return_inverse=True)
    n, k = X.shape
    n_classes = classes.size
    mtry = params.features_per_split or max(1, int(math.isqrt(k)))
    min_split = params.min_split or min_split_count(y_idx, n_classes, params.min_split_fraction)
    trees, oob = [], []
    for i in range(params.n_trees):
        rng = np.random.default_rng([params.seed, i])
        sample = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[sample], y_idx[sample], n_classes, params.max_depth, min_split, mtry, rng))
        oob.append(np.setdiff1d(np.arange(n), sample))
    return Forest(trees, classes, k, params, oob)


# -- model selection ---------------------------------------------------------------------------

def macro_auc(y_true, proba: np.ndarray, classes: np.ndarray) -> float:
    """Macro one-vs-rest ROC AUC (rank statistic; ties share average ranks)."""
    y_true = np.asarray(y_true)
    aucs = []
    for c, cls in enumerate(classes):
        pos = y_true == cls
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(proba[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs)) if aucs else 0.5


def select_n_trees(X, y, grid: Sequence[int], folds, params: Optional[ForestParams] = None) -> tuple[int, dict]:
    """Grid value with the best mean validation macro AUC (ties to the smaller value).

    ``folds`` is an array giving each sample's fold id.
    """
    grid = sorted(set(int(g) for g in grid))
    if not grid:
        raise ValueError("grid must not be empty")
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    folds = np.asarray(folds)
    scores = {g: [] for g in grid}
    for f in np.unique(folds):
        tr, va = folds != f, folds == f
        big = fit(X[tr], y[tr], ForestParams(**{**asdict(params), "n_trees": grid[-1]}))
        for g in grid:
            scores[g].append(macro_auc(y[va], big.predict_proba(X[va], g), big.classes))
    means = {g: float(np.mean(v)) for g, v in scores.items()}
    best = max(grid, key=lambda g: (means[g], -g))
    return best, means


# -- persistence ---------------------------------------------------------------------------------

def _params_block(forest: Forest) -> bytes:
    meta = {"params": asdict(forest.params), "classes": [str(c) for c in forest.classes],
            "class_dtype": forest.classes.dtype.str}
    return json.dumps(meta, sort_keys=True).encode("utf-8")


def save_forest(path, forest: Forest) -> None:
    block = _params_block(forest)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IIII", VERSION, len(forest.trees), forest.n_features,
                                     forest.classes.size))
        fh.write(struct.pack("<I", len(block)) + block)
        for t in forest.trees:
            fh.write(struct.pack("<I", t.n_nodes))
            fh.write(t.feature.astype("<i4").tobytes())
            fh.write(t.threshold.astype("<f8").tobytes())
            fh.write(t.left.astype("<i4").tobytes())
            fh.write(t.right.astype("<i4").tobytes())
            fh.write(t.value.astype("<f8").tobytes())


def load_forest(path) -> Forest:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a forest file")
    version, n_trees, n_features, n_classes = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 20
    (blen,) = struct.unpack_from("<I", data, pos)
    meta = json.loads(data[pos + 4:pos + 4 + blen].decode("utf-8"))
    pos += 4 + blen
    trees = []

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr.copy()

    for _ in range(n_trees):
        (nn,) = struct.unpack_from("<I", data, pos)
        pos += 4
        trees.append(Tree(take("<i4", nn).astype(np.int32), take("<f8", nn), take("<i4", nn).astype(np.int32),
                          take("<i4", nn).astype(np.int32), take("<f8", nn * n_classes).reshape(nn, n_classes)))
    classes = np.array(meta["classes"]).astype(np.dtype(meta["class_dtype"]))
    return Forest(trees, classes, n_features, ForestParams(**meta["params"]))


def to_json(forest: Forest) -> str:
    """Readable dump of every tree's nodes, for debugging."""
    out = {"params": asdict(forest.params), "classes": [str(c) for c in forest.classes],
           "n_features": forest.n_features, "trees": []}
    for t in forest.trees:
        nodes = []
        for i in range(t.n_nodes):
            if t.feature[i] == LEAF:
                nodes.append({"id": i, "leaf": [round(float(v), 12) for v in t.value[i]]})
            else:
                nodes.append({"id": i, "feature": int(t.feature[i]), "threshold": float(t.threshold[i]),
                              "left": int(t.left[i]), "right": int(t.right[i])})
        out["trees"].append(nodes)
    return json.dumps(out, indent=1, sort_keys=True)
