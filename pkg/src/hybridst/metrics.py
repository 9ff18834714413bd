"""Predictive scores, k-means spatial blocking and leave-one-block-out CV."""

import csv
from dataclasses import dataclass

import numpy as np

Z95 = 1.96


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mae: float
    cp: float
    aiw: float

    def as_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "cp": self.cp, "aiw": self.aiw}


def evaluate(y, pred_mean, pred_sd, z=Z95):
    """RMSE, MAE, coverage and mean width of ``mean +/- z * sd`` intervals."""
    y = np.asarray(y, dtype=float)
    m = np.asarray(pred_mean, dtype=float)
    s = np.broadcast_to(np.asarray(pred_sd, dtype=float), y.shape)
    if y.shape != m.shape:
        raise ValueError(f"length mismatch: y {y.shape} vs mean {m.shape}")
    if y.size == 0:
        raise ValueError("cannot evaluate an empty set")
    if np.any(s < 0):
        raise ValueError("predictive sd must be non-negative")
    err = y - m
    inside = np.abs(err) <= z * s
    return MetricReport(float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))),
                        float(np.mean(inside)), float(np.mean(2.0 * z * s)))


def mean_report(reports):
    reports = list(reports)
    return MetricReport(*(float(np.mean([getattr(r, k) for r in reports])) for k in ("rmse", "mae", "cp", "aiw")))


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(points, k, seed=0, max_iter=100):
    """Lloyd's algorithm with k-means++ seeding; returns labels in 0..k-1."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise ValueError("k must be positive")
    n_distinct = len(np.unique(X, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fitted point
                far = int(np.argmax(d2[np.arange(len(X)), labels]))
                centers[j] = X[far]
    return labels


def contiguous_groups(T, n_groups):
    """Split times 1..T into ``n_groups`` contiguous, near-equal groups."""
    if not 1 <= n_groups <= T:
        raise ValueError(f"cannot split {T} times into {n_groups} groups")
    return [list(map(int, g)) for g in np.array_split(np.arange(1, T + 1), n_groups)]


def block_layout(n_blocks):
    """(temporal groups, spatial clusters) used for 6, 8 and 16 blocks."""
    layouts = {1: (1, 1), 2: (2, 1), 4: (2, 2), 6: (2, 3), 8: (2, 4), 9: (3, 3), 12: (3, 4), 16: (4, 4)}
    if n_blocks not in layouts:
        raise ValueError(f"no block layout for {n_blocks} blocks; choose from {sorted(layouts)}")
    return layouts[n_blocks]


def st_blocks(data, temporal_groups, k_spatial, seed=0):
    """Block id per row (1-based): spatial k-means within each temporal group."""
    t = np.asarray(data.t)
    groups = [set(g) for g in temporal_groups]
    covered = set().union(*groups) if groups else set()
    if covered != set(np.unique(t).tolist()) or sum(map(len, groups)) != len(covered):
        raise ValueError("temporal groups must partition the observed time indices")
    coords = data.coords
    blocks = np.zeros(len(t), dtype=np.int64)
    for gi, g in enumerate(temporal_groups):
        rows = np.flatnonzero(np.isin(t, list(g)))
        labels = kmeans(coords[rows], k_spatial, seed=seed + gi)
        blocks[rows] = gi * k_spatial + labels + 1
    return blocks


@dataclass(frozen=True)
class CvRow:
    block: object  # int block id or "mean"
    split: str
    report: MetricReport


def cv_run(data, blocks, model_runner):
    """Leave-one-block-out CV.

    ``model_runner(train, test)`` receives two :class:`StDataset` objects and
    returns ``(train_pred, test_pred)``, each a ``(mean, sd)`` pair.  Returns
    per-block train/test rows followed by the two mean rows.
    """
    blocks = np.asarray(blocks)
    ids = np.unique(blocks)
    if len(ids) < 2:
        raise ValueError("cross-validation needs at least two blocks")
    rows = []
    for b in ids:
        test = blocks == b
        train_set, test_set = data.subset(~test), data.subset(test)
        (m_tr, s_tr), (m_te, s_te) = model_runner(train_set, test_set)
        rows.append(CvRow(int(b), "train", evaluate(train_set.response, m_tr, s_tr)))
        rows.append(CvRow(int(b), "test", evaluate(test_set.response, m_te, s_te)))
    for split in ("train", "test"):
        rows.append(CvRow("mean", split, mean_report(r.report for r in rows if r.split == split)))
    return rows


def write_metrics_csv(path, rows):
    """``block_id,split,rmse,mae,cp,aiw`` table."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_id", "split", "rmse", "mae", "cp", "aiw"])
        for r in rows:
            rep = r.report
            w.writerow([r.block, r.split, f"{rep.rmse:.6f}", f"{rep.mae:.6f}", f"{rep.cp:.6f}", f"{rep.aiw:.6f}"])
