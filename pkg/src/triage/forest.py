"""Random forest classifier written against numpy only.

Trees are stored as flat preorder arrays. Split search sorts each candidate
feature once per node and evaluates every midpoint threshold in vectorized
form; the weighted Gini sums are accumulated from per-class occurrence ranks,
so the cost does not grow with the number of classes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class ForestConfig:
    n_estimators: int = 100
    max_depth: int = 100
    max_features: str | float = "sqrt"
    min_samples_leaf: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_estimators, max_depth and min_samples_leaf must be >= 1")
        mf = self.max_features
        if isinstance(mf, str):
            if mf not in ("sqrt", "all"):
                raise ValueError(f"max_features must be 'sqrt', 'all' or a fraction, got {mf!r}")
        elif not 0.0 < float(mf) <= 1.0:
            raise ValueError(f"max_features fraction must be in (0, 1], got {mf}")

    def n_candidate_features(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        return max(1, int(float(self.max_features) * n_features))


@dataclass
class DecisionTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes) class probabilities
    n_samples: np.ndarray
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            go_left = X[rows, np.maximum(feat, 0)] <= self.threshold[node]
            node = np.where(active, np.where(go_left, self.left[node], self.right[node]), node)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def __eq__(self, other):
        if not isinstance(other, DecisionTree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("feature", "threshold", "left", "right", "value", "n_samples", "impurity")
        )


@dataclass
class ForestModel:
    trees: list
    n_classes: int
    feature_count: int

    def __post_init__(self):
        for t in self.trees:
            if t.value.shape[1] != self.n_classes:
                raise ValueError("trees disagree on n_classes")

    MAGIC = b"RFOR"
    VERSION = 1

    def save(self, path) -> None:
        with Path(path).open("wb") as fh:
            fh.write(self.MAGIC + bytes([self.VERSION]))
            fh.write(struct.pack("<QQQ", len(self.trees), self.n_classes, self.feature_count))
            for t in self.trees:
                fh.write(struct.pack("<Q", t.n_nodes))
                fh.write(t.feature.astype("<i4").tobytes())
                fh.write(t.threshold.astype("<f8").tobytes())
                fh.write(t.left.astype("<i4").tobytes())
                fh.write(t.right.astype("<i4").tobytes())
                fh.write(t.value.astype("<f8").tobytes())
                fh.write(t.n_samples.astype("<i8").tobytes())
                fh.write(t.impurity.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ForestModel":
        raw = Path(path).read_bytes()
        if raw[:4] != cls.MAGIC:
            raise ValueError("not a forest model file")
        if raw[4] != cls.VERSION:
            raise ValueError(f"unsupported forest model version {raw[4]}")
        n_trees, n_classes, n_feat = struct.unpack_from("<QQQ", raw, 5)
        off = 5 + 24
        trees = []

        def take(dtype, count):
            nonlocal off
            a = np.frombuffer(raw, dtype, count=count, offset=off).copy()
            off += a.nbytes
            return a

        for _ in range(n_trees):
            (n,) = struct.unpack_from("<Q", raw, off)
            off += 8
            feature = take("<i4", n).astype(np.int64)
            thr = take("<f8", n)
            left = take("<i4", n).astype(np.int64)
            right = take("<i4", n).astype(np.int64)
            value = take("<f8", n * n_classes).reshape(n, n_classes)
            ns = take("<i8", n)
            imp = take("<f8", n)
            trees.append(DecisionTree(feature, thr, left, right, value, ns, imp))
        return cls(trees, int(n_classes), int(n_feat))


def _gini(counts: np.ndarray, n: int) -> float:
    return 1.0 - float(np.sum((counts / n) ** 2))


def _best_split_on_feature(x, y, class_total, min_leaf):
    """Lowest weighted Gini split of one feature, or None.

    Returns ``(weighted_impurity, threshold)`` where the impurity is
    ``n_l * gini_l + n_r * gini_r``.
    """
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    # occ[i]: how many earlier samples (in sorted order) share ys[i]'s class
    by_class = np.argsort(ys, kind="stable")
    sorted_cls = ys[by_class]
    starts = np.searchsorted(sorted_cls, sorted_cls, side="left")
    occ = np.empty(n, dtype=np.int64)
    occ[by_class] = np.arange(n) - starts
    # sum of squared class counts of prefix / suffix, built by increments
    sq_left = np.cumsum(2 * occ + 1)
    after = class_total[ys] - 1 - occ
    sq_right_incl = np.cumsum((2 * after + 1)[::-1])[::-1]

    pos = np.arange(min_leaf - 1, n - min_leaf)  # left holds pos + 1 samples
    if pos.size == 0:
        return None
    pos = pos[xs[pos] < xs[pos + 1]]
    if pos.size == 0:
        return None
    nl = pos + 1.0
    nr = n - nl
    imp = (nl - sq_left[pos] / nl) + (nr - sq_right_incl[pos + 1] / nr)
    j = int(np.argmin(imp))
    i = pos[j]
    thr = 0.5 * (xs[i] + xs[i + 1])
    if thr >= xs[i + 1]:
        thr = xs[i]
    return float(imp[j]), float(thr)


def _build_tree(X, y, n_classes, config: ForestConfig, rng: np.random.Generator) -> DecisionTree:
    n, n_feat = X.shape
    max_f = config.n_candidate_features(n_feat)
    msl = config.min_samples_leaf
    sample = rng.integers(0, n, size=n)

    feature, threshold, left, right, value, n_samples, impurity = [], [], [], [], [], [], []
    stack = [(sample, 0, -1, False)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        node = len(feature)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        yk = y[idx]
        counts = np.bincount(yk, minlength=n_classes)
        m = idx.size
        g = _gini(counts, m)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts / m)
        n_samples.append(m)
        impurity.append(g)
        if depth >= config.max_depth or g <= 0.0 or m < 2 * msl:
            continue
        best = None
        evaluated = 0
        for f in rng.permutation(n_feat):
            if evaluated >= max_f:
                break
            x = X[idx, f]
            if x.min() == x.max():
                continue
            evaluated += 1
            res = _best_split_on_feature(x, yk, counts, msl)
            if res is None:
                continue
            cand = (res[0], int(f), res[1])
            if best is None or cand < best:
                best = cand
        if best is None:
            continue
        _, f, thr = best
        feature[node] = f
        threshold[node] = thr
        go_left = X[idx, f] <= thr
        stack.append((idx[~go_left], depth + 1, node, False))
        stack.append((idx[go_left], depth + 1, node, True))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64).reshape(len(feature), n_classes),
        n_samples=np.array(n_samples, dtype=np.int64),
        impurity=np.array(impurity, dtype=np.float64),
    )


def _check_X(X, feature_count=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError("X must be a 2-d matrix")
    if X.shape[1] == 0:
        raise ValueError("X has zero features")
    if feature_count is not None and X.shape[1] != feature_count:
        raise ValueError(f"expected {feature_count} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


def fit_forest(X, y, config: ForestConfig | None = None, n_classes: int | None = None) -> ForestModel:
    """Bagged Gini trees with per-split feature subsampling.

    Randomness for tree ``t`` comes from the ``t``-th child of
    ``SeedSequence(config.seed)``, so trees do not depend on training order.
    """
    config = config or ForestConfig()
    X = _check_X(X)
    y = np.asarray(y)
    if y.ndim != 1 or y.size != X.shape[0] or y.size < 1:
        raise ValueError("y must be a 1-d label vector with one entry per row of X")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_estimators)
    trees = [_build_tree(X, y, n_classes, config, np.random.default_rng(s)) for s in seeds]
    return ForestModel(trees, n_classes, X.shape[1])


def predict_proba(model: ForestModel, X) -> np.ndarray:
    """Mean of the leaf class distributions; accepts one vector or a matrix."""
    single = np.asarray(X).ndim == 1
    X = _check_X(X, model.feature_count)
    out = np.zeros((X.shape[0], model.n_classes))
    for t in model.trees:
        out += t.predict_proba(X)
    out /= len(model.trees)
    return out[0] if single else out


def feature_importances(model: ForestModel) -> np.ndarray:
    """Mean decrease in impurity per feature, normalized to sum to one."""
    total = np.zeros(model.feature_count)
    for t in model.trees:
        imp = np.zeros(model.feature_count)
        for i in np.flatnonzero(t.feature >= 0):
            l, r = t.left[i], t.right[i]
            gain = (t.n_samples[i] * t.impurity[i]
                    - t.n_samples[l] * t.impurity[l]
                    - t.n_samples[r] * t.impurity[r])
            imp[t.feature[i]] += max(gain, 0.0)
        if imp.sum() > 0:
            total += imp / imp.sum()
    if total.sum() <= 0:
        return np.full(model.feature_count, 1.0 / model.feature_count)
    return total / total.sum()
