"""Feature-space analytics: Isomap, a Gini random forest, ROC/AUC and grouped CV."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


class DisconnectedGraph(ValueError):
    pass


class SingleClassError(ValueError):
    pass


# --------------------------------------------------------------------------
# feature matrices


@dataclass
class FeatureMatrix:
    values: np.ndarray
    labels: np.ndarray
    ids: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None
    is_base: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.values)
        if self.values.ndim != 2 or len(self.labels) != n:
            raise ValueError("features must be (n, d) with n aligned labels")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("features contain non-finite values")
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        self.groups = self.ids.copy() if self.groups is None else np.asarray(self.groups)
        self.is_base = np.ones(n, dtype=bool) if self.is_base is None else np.asarray(self.is_base, dtype=bool)

    def __len__(self):
        return len(self.values)

    @property
    def dim(self):
        return self.values.shape[1]

    def subset(self, idx):
        return FeatureMatrix(self.values[idx], self.labels[idx], self.ids[idx], self.groups[idx], self.is_base[idx])


def extract_features(inv, data, batch_size=256):
    """Run every record of ``data`` through the inverse network, keeping row order."""
    records = data.records
    images = np.stack([r.image for r in records]).astype(np.float32)
    rows = [inv.invert_batch(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    values = np.concatenate(rows) if rows else np.zeros((0, inv.latent_dim), np.float32)
    return FeatureMatrix(
        values,
        [r.pvl_label for r in records],
        ids=np.array([r.id for r in records]),
        groups=np.array([r.group for r in records]),
        is_base=np.array([r.augmented_from is None for r in records]),
    )


# --------------------------------------------------------------------------
# Isomap


def pairwise_distances(x):
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def knn_graph(x, k):
    """Symmetrized k-nearest-neighbour graph; edge weights are Euclidean distances."""
    d = pairwise_distances(x)
    n = len(d)
    order = np.argsort(d + np.diag(np.full(n, np.inf)), axis=1, kind="stable")[:, :k]
    w = np.zeros_like(d)
    rows = np.repeat(np.arange(n), k)
    cols = order.reshape(-1)
    w[rows, cols] = d[rows, cols]
    w = np.maximum(w, w.T)
    return w


def geodesic_distances(x, k):
    w = knn_graph(x, k)
    graph = csr_matrix(w)
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        raise DisconnectedGraph(f"k-NN graph with k={k} has {n_comp} connected components")
    return shortest_path(graph, method="D", directed=False)


def classical_mds(dist, out_dim=2):
    """Classical scaling of a distance matrix.

    ``B = -1/2 J D^2 J``; coordinates are the top eigenvectors scaled by the
    square roots of their eigenvalues (negative eigenvalues clipped to 0).
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = len(dist)
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * j @ (dist**2) @ j
    b = 0.5 * (b + b.T)
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1][:out_dim]
    lam = np.maximum(evals[order], 0.0)
    coords = evecs[:, order] * np.sqrt(lam)
    return coords - coords.mean(axis=0)


def isomap(features, k=8, out_dim=2):
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    n = len(x)
    if k < 1 or out_dim > k or n <= k:
        raise ValueError(f"isomap needs 1 <= out_dim <= k < n (k={k}, out_dim={out_dim}, n={n})")
    return classical_mds(geodesic_distances(x, k), out_dim)


# --------------------------------------------------------------------------
# random forest


@dataclass
class Tree:
    """Flat binary tree. ``feature == -1`` marks a leaf; ``counts`` are (low, high)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def leaf_proba(self):
        c = self.counts.astype(np.float64)
        tot = c.sum(axis=1)
        return np.divide(c[:, 1], tot, out=np.zeros(len(c)), where=tot > 0)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float32)
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = x[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_proba(self, x):
        return self.leaf_proba()[self.apply(x)]


@dataclass
class ForestConfig:
    n_trees: int = 500
    max_depth: int = 16
    min_leaf: int = 1
    bootstrap: bool = True


@dataclass
class ForestModel:
    trees: list
    n_features: int
    seed: int = 0
    oob_indices: list = field(default_factory=list)

    @property
    def n_trees(self):
        return len(self.trees)

    def predict_proba_batch(self, x):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"expected feature vectors of length {self.n_features}, got shape {x.shape}")
        total = np.zeros(len(x), dtype=np.float64)
        for t in self.trees:
            total += t.predict_proba(x)
        return total / len(self.trees)

    def predict_batch(self, x):
        return (self.predict_proba_batch(x) > 0.5).astype(np.int64)


def tree_seed(master, index):
    return np.random.SeedSequence([int(master) & (2**64 - 1), int(index)])


def _gini(pos, tot):
    p = pos / tot
    return 2.0 * p * (1.0 - p)


def _best_split(x, y, w, feats, min_leaf):
    """Best (gain, feature, threshold) over ``feats``; ``w`` are bootstrap multiplicities."""
    tot = w.sum()
    pos = (w * y).sum()
    parent = _gini(pos, tot)
    best = (0.0, -1, 0.0)
    for f in feats:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ws = w[order]
        ps = ws * y[order]
        cw = np.cumsum(ws)[:-1]
        cp = np.cumsum(ps)[:-1]
        valid = (xs[1:] > xs[:-1]) & (cw >= min_leaf) & (tot - cw >= min_leaf)
        if not np.any(valid):
            continue
        cw, cp = cw[valid], cp[valid]
        rw, rp = tot - cw, pos - cp
        child = (cw * _gini(cp, cw) + rw * _gini(rp, rw)) / tot
        gain = parent - child
        i = int(np.argmax(gain))
        if gain[i] > best[0] + 1e-12:
            lo = xs[:-1][valid][i]
            hi = xs[1:][valid][i]
            thr = np.float32((np.float64(lo) + np.float64(hi)) / 2.0)
            if not lo <= thr < hi:
                thr = np.float32(lo)
            best = (float(gain[i]), int(f), thr)
    return best


def build_tree(x, y, weights, cfg, rng):
    """Grow one tree on rows with positive ``weights`` (bootstrap multiplicities)."""
    d = x.shape[1]
    m = max(1, math.ceil(math.sqrt(d)))
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(np.float32(0))
        left.append(0)
        right.append(0)
        counts.append((0, 0))
        return len(feature) - 1

    # pre-order growth with an explicit stack; children are pushed right first
    root = new_node()
    stack = [(root, np.nonzero(weights > 0)[0], 0)]
    while stack:
        node, idx, depth = stack.pop()
        w = weights[idx]
        yy = y[idx]
        n_pos = int((w * yy).sum())
        n_tot = int(w.sum())
        counts[node] = (n_tot - n_pos, n_pos)
        if n_pos == 0 or n_pos == n_tot or depth >= cfg.max_depth or n_tot < 2 * cfg.min_leaf:
            continue
        feats = rng.choice(d, size=m, replace=False)
        gain, f, thr = _best_split(x[idx], yy, w, feats, cfg.min_leaf)
        if f < 0:
            continue
        go_left = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        l_node = new_node()
        r_node = new_node()
        left[node], right[node] = l_node, r_node
        stack.append((r_node, idx[~go_left], depth + 1))
        stack.append((l_node, idx[go_left], depth + 1))
    return _preorder(
        Tree(
            np.array(feature, dtype=np.int32),
            np.array(threshold, dtype=np.float32),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(counts, dtype=np.int64).reshape(-1, 2),
        )
    )


def _preorder(tree):
    order = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        if tree.feature[i] >= 0:
            stack.append(tree.right[i])
            stack.append(tree.left[i])
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(len(order))
    order = np.array(order)
    is_split = tree.feature[order] >= 0
    return Tree(
        tree.feature[order],
        tree.threshold[order],
        np.where(is_split, pos[tree.left[order]], 0),
        np.where(is_split, pos[tree.right[order]], 0),
        tree.counts[order],
    )


def train_forest(features, cfg=None, seed=0):
    cfg = cfg or ForestConfig()
    x = np.asarray(features.values, dtype=np.float32)
    y = np.asarray(features.labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClassError("random forest needs both classes in the training labels")
    n = len(x)
    trees, oob = [], []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(tree_seed(seed, t))
        if cfg.bootstrap:
            draws = rng.integers(0, n, size=n)
            weights = np.bincount(draws, minlength=n)
        else:
            weights = np.ones(n, dtype=np.int64)
        trees.append(build_tree(x, y, weights, cfg, rng))
        oob.append(np.nonzero(weights == 0)[0])
    return ForestModel(trees, x.shape[1], seed, oob)


def predict_proba(model, x):
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (model.n_features,):
        raise ValueError(f"feature vector must have length {model.n_features}, got shape {x.shape}")
    return float(model.predict_proba_batch(x[None])[0])


def predict(model, x):
    """Predicted class; a probability of exactly 0.5 counts as low."""
    return int(predict_proba(model, x) > 0.5)


# --------------------------------------------------------------------------
# ROC / AUC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if len(np.unique(labels)) < 2:
        raise SingleClassError("ROC needs both classes present")
    return scores, labels


def roc_auc(scores, labels):
    """ROC over all distinct thresholds (descending) with trapezoidal AUC."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    thresholds = np.r_[np.inf, s[last]]
    # integer trapezoid sum keeps the area exact up to one final division
    area = np.sum(np.diff(np.r_[0, fps]) * (np.r_[0, tps][:-1] + tps)) / (2.0 * n_pos * n_neg)
    return RocCurve(fpr, tpr, thresholds, float(area))


def pairwise_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(equal), by brute force over all pairs."""
    scores, labels = _check_binary(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


# --------------------------------------------------------------------------
# cross validation


@dataclass
class FoldResult:
    accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    tn: int
    fp: int
    fn: int
    roc: RocCurve
    test_ids: np.ndarray
    train_groups: np.ndarray
    test_groups: np.ndarray


@dataclass
class FoldMetrics:
    folds: list

    @property
    def accuracy(self):
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def sensitivity(self):
        return float(np.mean([f.sensitivity for f in self.folds]))

    @property
    def specificity(self):
        return float(np.mean([f.specificity for f in self.folds]))

    @property
    def aucs(self):
        return [f.roc.auc for f in self.folds]


def confusion(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    return tp, tn, fp, fn


def stratified_group_folds(groups, labels, k, rng):
    """Fold index per row: groups are shuffled within each class and dealt round-robin."""
    groups = np.asarray(groups)
    labels = np.asarray(labels)
    uniq, first = np.unique(groups, return_index=True)
    glabels = labels[first]
    for g, lab in zip(uniq, glabels):
        if np.any(labels[groups == g] != lab):
            raise ValueError(f"group {g} mixes labels")
    fold_of = {}
    for lab in (0, 1):
        members = uniq[glabels == lab]
        if len(members) < k:
            raise ValueError(f"class {lab} has {len(members)} groups, fewer than k={k} folds")
        members = members[rng.permutation(len(members))]
        for i, g in enumerate(members):
            fold_of[g] = i % k
    return np.array([fold_of[g] for g in groups])


def cross_validate(features, cfg=None, k=4, seed=0):
    """Grouped, stratified k-fold CV of the random forest.

    Rows sharing a group (a base record and its augmented copies) always land
    in the same fold. Training uses every row of the other folds; evaluation
    uses only the base rows of the held-out fold.
    """
    cfg = cfg or ForestConfig()
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0xC5]))
    fold = stratified_group_folds(features.groups, features.labels, k, rng)
    results = []
    for i in range(k):
        train_idx = np.nonzero(fold != i)[0]
        test_idx = np.nonzero((fold == i) & features.is_base)[0]
        train = features.subset(train_idx)
        test = features.subset(test_idx)
        model = train_forest(train, cfg, seed=int(rng.integers(2**63)))
        proba = model.predict_proba_batch(test.values)
        pred = (proba > 0.5).astype(np.int64)
        tp, tn, fp, fn = confusion(pred, test.labels)
        results.append(
            FoldResult(
                accuracy=(tp + tn) / len(test),
                sensitivity=tp / (tp + fn) if tp + fn else 0.0,
                specificity=tn / (tn + fp) if tn + fp else 0.0,
                tp=tp,
                tn=tn,
                fp=fp,
                fn=fn,
                roc=roc_auc(proba, test.labels),
                test_ids=test.ids,
                train_groups=np.unique(train.groups),
                test_groups=np.unique(test.groups),
            )
        )
    return FoldMetrics(results)
