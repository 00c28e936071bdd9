"""Regression forest whose leaves keep mean, population variance and count.

The forest predictive distribution combines per-tree leaf statistics with
the law of total variance::

    mean     = 1/B * sum_i mu_i
    variance = 1/B * sum_i var_i + 1/B * sum_i (mu_i - mean)**2

Trees are grown greedily with variance-reduction (CART) splits on a random
feature subset per node. Samples with ``x[f] <= threshold`` go left.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

FORMAT_VERSION = 1
_LEAF = -1
_NO_KEYS = np.zeros((0, 0))


@dataclass(frozen=True)
class ForestTrainConfig:
    num_trees: int = 100
    max_depth: int = 64
    min_samples_leaf: int = 1
    feature_subsample: float = 1.0 / 3.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: float
    variance: float

    def __post_init__(self):
        if not (self.variance >= 0.0 and math.isfinite(self.variance)):
            raise ValueError(f"invalid variance {self.variance}")


@dataclass(frozen=True)
class LeafStats:
    mean: float
    variance: float
    count: int


class RegressionTree:
    """Array-backed binary tree, nodes stored in preorder.

    ``feature[k] == -1`` marks a leaf; leaves carry ``mean``, ``variance`` and
    ``count``; internal nodes carry ``threshold``, ``left`` and ``right``.
    """

    __slots__ = ("feature", "threshold", "left", "right", "mean", "variance", "count")

    def __init__(self, feature, threshold, left, right, mean, variance, count):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = np.asarray(variance, dtype=np.float64)
        self.count = np.asarray(count, dtype=np.int64)
        for arr in (self.feature, self.threshold, self.left, self.right,
                    self.mean, self.variance, self.count):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] != _LEAF:
                depth[self.left[k]] = depth[k] + 1
                depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def leaf_index(self, x: np.ndarray) -> int:
        k = 0
        while self.feature[k] != _LEAF:
            k = self.left[k] if x[self.feature[k]] <= self.threshold[k] else self.right[k]
        return int(k)

    def leaf(self, x) -> LeafStats:
        k = self.leaf_index(np.asarray(x, dtype=np.float64))
        return LeafStats(float(self.mean[k]), float(self.variance[k]), int(self.count[k]))

    def same_structure(self, other: "RegressionTree") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in self.__slots__
        )

    # Nested preorder node dicts; a child's position is implied by the order.
    def to_nodes(self) -> list[dict]:
        nodes = []
        for k in range(self.n_nodes):
            if self.feature[k] == _LEAF:
                nodes.append({
                    "mean": float(self.mean[k]),
                    "variance": float(self.variance[k]),
                    "count": int(self.count[k]),
                })
            else:
                nodes.append({
                    "feature": int(self.feature[k]),
                    "threshold": float(self.threshold[k]),
                    "right": int(self.right[k]),
                })
        return nodes

    @classmethod
    def from_nodes(cls, nodes: list[dict]) -> "RegressionTree":
        n = len(nodes)
        feature = np.full(n, _LEAF)
        threshold = np.zeros(n)
        left = np.full(n, -1)
        right = np.full(n, -1)
        mean = np.zeros(n)
        variance = np.zeros(n)
        count = np.zeros(n, dtype=np.int64)
        for k, node in enumerate(nodes):
            if "feature" in node:
                feature[k] = node["feature"]
                threshold[k] = node["threshold"]
                left[k] = k + 1
                right[k] = node["right"]
            else:
                mean[k] = node["mean"]
                variance[k] = node["variance"]
                count[k] = node["count"]
        return cls(feature, threshold, left, right, mean, variance, count)



@njit(cache=True)
def _grow_tree(X, y, idx, n_sub, min_leaf, max_depth, keys):
    """Grow one tree over rows ``idx`` of ``X``; nodes are emitted in preorder.

    ``keys[k]`` holds uniform draws that pick the feature subset of node k.
    Earlier features and lower thresholds win ties between equal splits.
    """
    n = idx.size
    n_features = X.shape[1]
    cap = 2 * n
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    mean = np.zeros(cap)
    variance = np.zeros(cap)
    count = np.zeros(cap, np.int64)

    work = idx.copy()
    buf = np.empty(n, np.int64)
    # stack rows: start, end, depth, parent awaiting a right child (-1 if none)
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = 0
    stack[0, 3] = -1
    top = 1
    n_nodes = 0
    all_features = np.arange(n_features)
    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        parent = stack[top, 3]
        k = n_nodes
        n_nodes += 1
        if parent >= 0:
            right[parent] = k
        m = end - start
        rows = work[start:end].copy()
        ys = y[rows]
        mu = ys.mean()

        best_col = -1
        best_thr = 0.0
        constant = True
        for i in range(1, m):
            if ys[i] != ys[0]:
                constant = False
                break
        if depth < max_depth and m >= 2 * min_leaf and not constant:
            yc = ys - mu
            parent_sse = 0.0
            total = 0.0
            for i in range(m):
                parent_sse += yc[i] * yc[i]
                total += yc[i]
            if n_sub < n_features:
                feats = np.sort(np.argsort(keys[k])[:n_sub])
            else:
                feats = all_features
            best_sse = parent_sse
            for f in feats:
                col = X[rows, f]
                order = np.argsort(col, kind="mergesort")
                s = 0.0
                sq = 0.0
                for p in range(m - 1):
                    yv = yc[order[p]]
                    s += yv
                    sq += yv * yv
                    n_left = p + 1
                    n_right = m - n_left
                    lo = col[order[p]]
                    hi = col[order[p + 1]]
                    if n_left < min_leaf or n_right < min_leaf or not lo < hi:
                        continue
                    sse = (sq - s * s / n_left) + (
                        (parent_sse - sq) - (total - s) ** 2 / n_right
                    )
                    if sse < best_sse:
                        best_sse = sse
                        best_col = f
                        thr = 0.5 * (lo + hi)
                        if not thr < hi:
                            thr = lo
                        best_thr = thr

        if best_col < 0:
            count[k] = m
            if constant:
                mean[k] = ys[0]
                continue
            var = 0.0
            for i in range(m):
                var += (ys[i] - mu) ** 2
            mean[k] = mu
            variance[k] = var / m
            continue

        n_left = 0
        for i in range(m):
            if X[rows[i], best_col] <= best_thr:
                buf[n_left] = rows[i]
                n_left += 1
        j = n_left
        for i in range(m):
            if not X[rows[i], best_col] <= best_thr:
                buf[j] = rows[i]
                j += 1
        work[start:end] = buf[:m]
        feature[k] = best_col
        threshold[k] = best_thr
        left[k] = k + 1
        # right pushed first so the left subtree is emitted next
        stack[top, 0] = start + n_left
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = k
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + n_left
        stack[top, 2] = depth + 1
        stack[top, 3] = -1
        top += 1
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), mean[:n_nodes].copy(), variance[:n_nodes].copy(),
            count[:n_nodes].copy())

@njit(cache=True)
def _find_leaves(roots, feature, threshold, left, right, X):
    out = np.empty((roots.size, X.shape[0]), np.int64)
    for b in range(roots.size):
        for r in range(X.shape[0]):
            k = roots[b]
            while feature[k] != -1:
                if X[r, feature[k]] <= threshold[k]:
                    k = left[k]
                else:
                    k = right[k]
            out[b, r] = k
    return out


@dataclass(frozen=True, eq=False)
class RegressionForest:
    trees: tuple[RegressionTree, ...]
    feature_dim: int
    train_config: ForestTrainConfig

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if len(self.trees) < 1:
            raise ValueError("a forest needs at least one tree")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    def tree_stats(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-tree leaf (means, variances) for each row: arrays of shape (B, n)."""
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        flat = self._flat()
        leaves = _find_leaves(flat["roots"], flat["feature"], flat["threshold"],
                              flat["left"], flat["right"], X)
        return flat["mean"][leaves], flat["variance"][leaves]

    def predict_many(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized total-variance prediction for rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise ValueError(
                f"input has {X.shape[1]} features, forest expects {self.feature_dim}"
            )
        means, variances = self.tree_stats(X)
        mu = means.mean(axis=0)
        var = variances.mean(axis=0) + ((means - mu) ** 2).mean(axis=0)
        return mu, var

    def _flat(self) -> dict:
        cached = self.__dict__.get("_flat_cache")
        if cached is not None:
            return cached
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
        flat = {
            "roots": offsets.astype(np.int64),
            "feature": np.concatenate([t.feature for t in self.trees]),
            "threshold": np.concatenate([t.threshold for t in self.trees]),
            "left": np.concatenate([np.where(t.left >= 0, t.left + o, -1)
                                    for t, o in zip(self.trees, offsets)]),
            "right": np.concatenate([np.where(t.right >= 0, t.right + o, -1)
                                     for t, o in zip(self.trees, offsets)]),
            "mean": np.concatenate([t.mean for t in self.trees]),
            "variance": np.concatenate([t.variance for t in self.trees]),
        }
        object.__setattr__(self, "_flat_cache", flat)
        return flat

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "feature_dim": self.feature_dim,
            "train_config": asdict(self.train_config),
            "trees": [t.to_nodes() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionForest":
        return cls(
            trees=tuple(RegressionTree.from_nodes(nodes) for nodes in d["trees"]),
            feature_dim=int(d["feature_dim"]),
            train_config=ForestTrainConfig(**d.get("train_config", {})),
        )


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LCROLL_THREADS", "1")))
    except ValueError:
        return 1


def fit_forest(features, targets, config: ForestTrainConfig = ForestTrainConfig()) -> RegressionForest:
    """Fit ``config.num_trees`` trees; tree ``i`` draws from stream ``(seed, i)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise ValueError("features must be a 2-d matrix")
    if X.shape[0] == 0 or y.size == 0:
        raise ValueError("empty training set")
    if X.shape[1] == 0:
        raise ValueError("features have zero columns")
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} feature rows but {y.size} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    n, n_features = X.shape
    n_sub = max(1, min(n_features, math.ceil(config.feature_subsample * n_features)))

    def grow(i: int) -> RegressionTree:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        idx = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        keys = rng.random((2 * n, n_features)) if n_sub < n_features else _NO_KEYS
        return RegressionTree(*_grow_tree(X, y, idx, n_sub, config.min_samples_leaf,
                                          config.max_depth, keys))

    workers = min(_worker_count(), config.num_trees)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(grow, range(config.num_trees)))
    else:
        trees = [grow(i) for i in range(config.num_trees)]
    return RegressionForest(tuple(trees), X.shape[1], config)


def forest_predict(forest: RegressionForest, x) -> PredictiveGaussian:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != forest.feature_dim:
        raise ValueError(f"input has {x.size} features, forest expects {forest.feature_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    mu, var = forest.predict_many(x[None, :])
    return PredictiveGaussian(float(mu[0]), max(float(var[0]), 0.0))


def sample_prediction(g: PredictiveGaussian, rng: np.random.Generator) -> float:
    z = rng.standard_normal()
    if g.variance == 0.0:
        return g.mean
    return g.mean + math.sqrt(g.variance) * z


def save_forest(forest: RegressionForest, path, **extra) -> None:
    doc = {**extra, **forest.to_dict()}
    with open(Path(path), "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_forest_doc(path) -> dict:
    with open(Path(path)) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported forest format {doc.get('format_version')!r}")
    return doc
