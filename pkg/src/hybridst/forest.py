"""Regression random forests (CART trees on bootstrap samples).

Trees are grown with numba kernels that release the GIL, so a thread pool
builds them in parallel.  Each tree draws its bootstrap sample and its
per-node feature subsets from a generator seeded with ``seed + tree_index``
(node subsets through keys derived from the tree path),
which makes the ensemble independent of the thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    mtry: int = None  # default max(1, p // 3)
    min_leaf: int = 5
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.n_trees < 1 or self.min_leaf < 1 or self.n_threads < 1:
            raise ValueError("n_trees, min_leaf and n_threads must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")

    def resolve_mtry(self, p):
        m = max(1, p // 3) if self.mtry is None else int(self.mtry)
        if not 1 <= m <= p:
            raise ValueError(f"mtry must be in [1, {p}], got {m}")
        return m


@njit(cache=True, nogil=True)
def _best_split(X, y, idx, features, min_leaf):
    """Best (feature, threshold, gain) among ``features`` for rows ``idx``.

    Candidate thresholds are midpoints between consecutive distinct values.
    Ties keep the first candidate in (feature order, ascending threshold).
    Returns feature -1 when no split leaves ``min_leaf`` rows on each side.
    """
    n = idx.shape[0]
    total = 0.0
    for i in range(n):
        total += y[idx[i]]
    base = total * total / n
    best_f = -1
    best_t = 0.0
    best_score = -np.inf
    xs = np.empty(n)
    ys = np.empty(n)
    for f in features:
        for i in range(n):
            xs[i] = X[idx[i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(n):
            ys[i] = y[idx[order[i]]]
        left = 0.0
        for i in range(n - 1):
            left += ys[i]
            nl = i + 1
            if nl < min_leaf:
                continue
            if n - nl < min_leaf:
                break
            a = xs[order[i]]
            b = xs[order[i + 1]]
            if a == b:
                continue
            right = total - left
            score = left * left / nl + right * right / (n - nl)
            if best_f < 0 or score > best_score + 1e-12 * abs(best_score):
                best_score = score
                best_f = f
                best_t = 0.5 * (a + b)
    gain = best_score - base if best_f >= 0 else 0.0
    return best_f, best_t, gain


@njit(cache=True, nogil=True)
def _mix(key):
    # splitmix64 finalizer
    z = key + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _node_features(key, p, mtry):
    """Sorted random subset of ``mtry`` features determined by the node key."""
    feats = np.arange(p)
    state = key
    for i in range(mtry):
        state = _mix(state)
        j = i + np.int64(state % np.uint64(p - i))
        tmp = feats[i]
        feats[i] = feats[j]
        feats[j] = tmp
    return np.sort(feats[:mtry])


@njit(cache=True, nogil=True)
def _grow_tree(X, y, sample, mtry, min_leaf, tree_key):
    """Grow one tree depth-first.

    Each node draws its feature subset from a key derived from its path in the
    tree, so a change in one subtree leaves the draws elsewhere untouched.
    """
    n, p = X.shape
    cap = 2 * sample.shape[0] + 1
    feat = np.full(cap, LEAF, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros(cap)
    stack_nodes = [0]
    stack_keys = [tree_key]
    stack_rows = [sample.copy()]
    n_nodes = 1
    while len(stack_nodes) > 0:
        node = stack_nodes.pop()
        key = stack_keys.pop()
        rows = stack_rows.pop()
        m = rows.shape[0]
        s = 0.0
        for i in range(m):
            s += y[rows[i]]
        value[node] = s / m
        if m < 2 * min_leaf:
            continue
        const = True
        for i in range(1, m):
            if y[rows[i]] != y[rows[0]]:
                const = False
                break
        if const:
            continue
        feats = _node_features(key, p, mtry)
        f, t, gain = _best_split(X, y, rows, feats, min_leaf)
        if f < 0 or gain <= 0.0:
            continue
        mask = np.empty(m, dtype=np.bool_)
        for i in range(m):
            mask[i] = X[rows[i], f] <= t
        feat[node] = f
        thr[node] = t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_nodes.append(n_nodes + 1)
        stack_keys.append(_mix(key * np.uint64(2) + np.uint64(2)))
        stack_rows.append(rows[~mask])
        stack_nodes.append(n_nodes)
        stack_keys.append(_mix(key * np.uint64(2) + np.uint64(1)))
        stack_rows.append(rows[mask])
        n_nodes += 2
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@njit(cache=True, nogil=True)
def _predict_tree(feat, thr, left, right, value, X):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feat[node] != LEAF:
            if X[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self):
        return int(np.sum(self.feature == LEAF))

    def predict(self, X):
        return _predict_tree(self.feature, self.threshold, self.left, self.right, self.value,
                             np.ascontiguousarray(X, dtype=float))


@dataclass(eq=False)
class ForestFit:
    config: ForestConfig
    trees: list = field(repr=False)
    n_features: int = 0
    oob_pred: np.ndarray = field(default=None, repr=False)
    oob_count: np.ndarray = field(default=None, repr=False)
    oob_mse: float = float("nan")

    @property
    def has_oob(self):
        return self.oob_count > 0


def best_split(X, y, features=None, min_leaf=5):
    """Exhaustive best split of all rows; returns ``(feature, threshold, gain)``.

    ``feature`` is ``None`` when no admissible split exists.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    feats = np.arange(X.shape[1]) if features is None else np.sort(np.asarray(features, dtype=np.int64))
    f, t, g = _best_split(X, y, np.arange(len(y)), feats, int(min_leaf))
    return (None, None, 0.0) if f < 0 else (int(f), float(t), float(g))


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"X must be (n, p) and y (n,), got {X.shape} and {y.shape}")
    if X.shape[0] == 0:
        raise ValueError("cannot fit a forest to zero rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    return X, y


def fit_forest(X, y, config=ForestConfig()):
    """Grow ``config.n_trees`` trees and collect out-of-bag predictions.

    Rows that are in-bag for every tree get the full-ensemble prediction in
    ``oob_pred`` and are excluded from ``oob_mse``.
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    mtry = config.resolve_mtry(p)

    def grow(b):
        rng = np.random.default_rng(config.seed + b)
        sample = np.sort(rng.integers(0, n, n))
        tree_key = np.uint64(rng.integers(0, 2**63 - 1))
        arrays = _grow_tree(X, y, sample, mtry, config.min_leaf, tree_key)
        tree = Tree(*arrays)
        inbag = np.zeros(n, dtype=bool)
        inbag[sample] = True
        oob = np.flatnonzero(~inbag)
        return tree, oob, tree.predict(X[oob])

    if config.n_threads > 1:
        with ThreadPoolExecutor(config.n_threads) as pool:
            results = list(pool.map(grow, range(config.n_trees)))
    else:
        results = [grow(b) for b in range(config.n_trees)]

    trees = [r[0] for r in results]
    total = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for _, oob, pred in results:
        total[oob] += pred
        count[oob] += 1
    fit = ForestFit(config, trees, p)
    has = count > 0
    oob_pred = np.empty(n)
    oob_pred[has] = total[has] / count[has]
    if not has.all():
        oob_pred[~has] = predict(fit, X[~has])
    fit.oob_pred = oob_pred
    fit.oob_count = count
    fit.oob_mse = float(np.mean((y[has] - oob_pred[has]) ** 2)) if has.any() else float("nan")
    return fit


def predict(fit, X):
    """Average of the tree predictions."""
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != fit.n_features:
        raise ValueError(f"expected {fit.n_features} features, got shape {X.shape}")
    out = np.zeros(X.shape[0])
    for tree in fit.trees:
        out += tree.predict(X)
    return out / len(fit.trees)
