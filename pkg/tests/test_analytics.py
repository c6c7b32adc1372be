import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ginvp import analytics as an
from ginvp.io import serialize_model


def separable(n=80, seed=0, margin=0.5):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 2))
    # classes sit on either side of x0 = 0 with a gap of `margin`
    keep = np.abs(x[:, 0]) > margin / 2
    x = x[keep]
    y = (x[:, 0] > 0).astype(int)
    return an.FeatureMatrix(x, y)


# ---------------------------------------------------------------- isomap


def pca_oracle(x, k):
    xc = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    return u[:, :k] * s[:k]


def match_signs(a, b):
    return a * np.sign(np.sum(a * b, axis=0))


def test_isomap_collinear_preserves_distances():
    direction = np.random.default_rng(0).standard_normal(10)
    direction /= np.linalg.norm(direction)
    x = np.outer(np.arange(5) * 0.7, direction) + 3.0
    emb = an.isomap(x, k=2, out_dim=2)
    np.testing.assert_allclose(an.pairwise_distances(emb), an.pairwise_distances(x), atol=1e-6)
    np.testing.assert_allclose(emb.mean(axis=0), 0, atol=1e-6)


def test_isomap_complete_graph_equals_mds_oracle():
    x = np.random.default_rng(1).standard_normal((10, 4))
    emb = an.isomap(x, k=9, out_dim=2)
    oracle = pca_oracle(x, 2)
    np.testing.assert_allclose(match_signs(emb, oracle), oracle, atol=1e-6)


def test_isomap_circle_arc_length():
    n = 40
    t = 2 * math.pi * np.arange(n) / n
    x = np.c_[np.cos(t), np.sin(t)]
    geo = an.geodesic_distances(x, 2)
    chord = 2 * math.sin(math.pi / n)
    adjacent = np.array([geo[i, (i + 1) % n] for i in range(n)])
    np.testing.assert_allclose(adjacent, chord, rtol=1e-9)
    polygon = 2 * math.pi * math.sin(math.pi / n) / (math.pi / n)
    assert abs(adjacent.sum() - polygon) <= 0.02 * polygon
    assert geo[0, n // 2] == pytest.approx(polygon / 2, rel=1e-9)
    emb = an.isomap(x, k=2, out_dim=2)
    assert emb.shape == (n, 2)


def test_isomap_disconnected_graph_errors():
    x = np.r_[np.random.default_rng(2).normal(0, 0.1, (6, 2)), np.random.default_rng(3).normal(50, 0.1, (6, 2))]
    with pytest.raises(an.DisconnectedGraph, match="2 connected components"):
        an.isomap(x, k=2)


def test_isomap_argument_checks():
    x = np.zeros((5, 2))
    with pytest.raises(ValueError):
        an.isomap(x, k=5)
    with pytest.raises(ValueError):
        an.isomap(x, k=1, out_dim=2)


def test_knn_graph_is_symmetrized():
    x = np.array([[0.0], [1.0], [1.5], [10.0]])
    w = an.knn_graph(x, 1)
    # 10.0 picks 1.5 as its neighbour; the edge must appear from both ends
    assert w[3, 2] == w[2, 3] == pytest.approx(8.5)
    np.testing.assert_array_equal(w, w.T)


# ---------------------------------------------------------------- ROC / AUC


def test_auc_perfect_and_inverted():
    s = [0.9, 0.8, 0.2, 0.1]
    assert an.roc_auc(s, [1, 1, 0, 0]).auc == 1.0
    assert an.roc_auc(s, [0, 0, 1, 1]).auc == 0.0


def test_auc_with_ties_by_pair_counting():
    s, y = [0.7, 0.5, 0.5, 0.2], [1, 0, 1, 0]
    assert an.pairwise_auc(s, y) == 0.875
    assert an.roc_auc(s, y).auc == pytest.approx(0.875, abs=1e-15)


def test_roc_curve_shape():
    roc = an.roc_auc([0.3, 0.1, 0.9, 0.5, 0.5], [0, 0, 1, 1, 0])
    assert (roc.fpr[0], roc.tpr[0]) == (0, 0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1, 1)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert np.isinf(roc.thresholds[0]) and np.all(np.diff(roc.thresholds[1:]) < 0)


def test_auc_single_class_errors():
    with pytest.raises(an.SingleClassError):
        an.roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**32 - 1), st.booleans())
def test_auc_equals_pairwise_statistic(n, seed, coarse):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 5, n) / 4 if coarse else rng.random(n)
    assert abs(an.roc_auc(s, y).auc - an.pairwise_auc(s, y)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    s = rng.integers(0, 10, 50).astype(float)
    assert an.roc_auc(s, y).auc == an.roc_auc(np.exp(s) * 3 + 1, y).auc


# ---------------------------------------------------------------- forest


def test_forest_separable_training_accuracy():
    data = separable()
    forest = an.train_forest(data, an.ForestConfig(n_trees=50), seed=1)
    assert np.all(forest.predict_batch(data.values) == data.labels)
    assert forest.n_trees == 50


def test_forest_same_seed_identical():
    data = separable(seed=3)
    cfg = an.ForestConfig(n_trees=20)
    a = serialize_model(an.train_forest(data, cfg, seed=9))
    b = serialize_model(an.train_forest(data, cfg, seed=9))
    c = serialize_model(an.train_forest(data, cfg, seed=10))
    assert a == b and a != c


def test_forest_degenerate_single_leaf():
    x = np.ones((10, 3))
    y = np.array([0] * 7 + [1] * 3)
    data = an.FeatureMatrix(x, y)
    forest = an.train_forest(data, an.ForestConfig(n_trees=5, bootstrap=False), seed=0)
    assert all(len(t.feature) == 1 for t in forest.trees)
    assert an.predict_proba(forest, np.ones(3, np.float32)) == pytest.approx(0.3)
    assert an.predict(forest, np.ones(3, np.float32)) == 0
    boot = an.train_forest(data, an.ForestConfig(n_trees=25), seed=0)
    assert np.all(boot.predict_batch(x) == 0)


def test_forest_single_class_errors():
    with pytest.raises(an.SingleClassError):
        an.train_forest(an.FeatureMatrix(np.zeros((4, 2)), [1, 1, 1, 1]))


def test_forest_leaves_nonempty_and_preorder():
    data = separable(seed=4)
    forest = an.train_forest(data, an.ForestConfig(n_trees=10, max_depth=4), seed=2)
    for t in forest.trees:
        leaves = t.feature < 0
        assert np.all(t.counts[leaves].sum(axis=1) >= 1)
        split = np.nonzero(~leaves)[0]
        # pre-order: left child immediately follows its parent
        assert np.all(t.left[split] == split + 1)
        assert np.all(t.right[split] > t.left[split])


def test_forest_max_depth_respected():
    data = separable(seed=5)
    forest = an.train_forest(data, an.ForestConfig(n_trees=5, max_depth=1), seed=0)
    for t in forest.trees:
        assert len(t.feature) <= 3


def leaf_tree(low, high):
    return an.Tree(np.array([-1], np.int32), np.zeros(1, np.float32), np.zeros(1), np.zeros(1), np.array([[low, high]]))


def test_hand_built_forest_tie_predicts_low():
    forest = an.ForestModel([leaf_tree(0, 4), leaf_tree(2, 2), leaf_tree(5, 0)], n_features=2)
    assert an.predict_proba(forest, np.zeros(2, np.float32)) == 0.5
    assert an.predict(forest, np.zeros(2, np.float32)) == 0


def test_all_pure_high_leaves():
    forest = an.ForestModel([leaf_tree(0, 3), leaf_tree(0, 1)], n_features=1)
    assert an.predict_proba(forest, np.zeros(1, np.float32)) == 1.0


def test_proba_invariant_under_tree_order():
    data = separable(seed=6)
    forest = an.train_forest(data, an.ForestConfig(n_trees=15), seed=3)
    x = np.random.default_rng(0).uniform(-1, 1, (30, 2))
    p = forest.predict_proba_batch(x)
    rev = an.ForestModel(forest.trees[::-1], 2)
    np.testing.assert_allclose(rev.predict_proba_batch(x), p, atol=1e-15)
    assert np.all((p >= 0) & (p <= 1))


def test_predict_proba_length_mismatch():
    forest = an.ForestModel([leaf_tree(1, 1)], n_features=3)
    with pytest.raises(ValueError):
        an.predict_proba(forest, np.zeros(2, np.float32))


def test_threshold_sits_between_samples():
    x = np.array([[0.1], [0.2], [0.3], [0.4]], np.float32)
    data = an.FeatureMatrix(x, [0, 0, 1, 1])
    forest = an.train_forest(data, an.ForestConfig(n_trees=1, bootstrap=False), seed=0)
    t = forest.trees[0]
    assert t.feature[0] == 0
    assert np.float32(0.2) <= t.threshold[0] < np.float32(0.3)


# ---------------------------------------------------------------- cross validation


def grouped_features(n_groups=40, copies=3, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(-1, 1, (n_groups, 3))
    labels = (base[:, 0] > 0.2).astype(int)
    vals, labs, groups, is_base = [], [], [], []
    for g in range(n_groups):
        for c in range(copies):
            vals.append(base[g] + rng.normal(0, 0.01, 3) * (c > 0))
            labs.append(labels[g])
            groups.append(g)
            is_base.append(c == 0)
    return an.FeatureMatrix(np.array(vals), labs, ids=np.arange(len(vals)), groups=groups, is_base=is_base)


def test_stratified_folds_balanced():
    fm = grouped_features()
    fold = an.stratified_group_folds(fm.groups, fm.labels, 4, np.random.default_rng(0))
    base = fm.is_base
    for lab in (0, 1):
        sizes = np.bincount(fold[base & (fm.labels == lab)], minlength=4)
        assert sizes.max() - sizes.min() <= 1


def test_cross_validate_separable_is_perfect():
    data = separable(n=120, seed=7)
    m = an.cross_validate(data, an.ForestConfig(n_trees=30), k=4, seed=0)
    assert m.accuracy == 1.0
    assert m.aucs == [1.0] * 4


def test_cross_validate_no_group_leakage():
    fm = grouped_features()
    m = an.cross_validate(fm, an.ForestConfig(n_trees=10), k=4, seed=1)
    seen = set()
    for f in m.folds:
        assert not set(f.train_groups) & set(f.test_groups)
        # only base rows are scored
        assert np.all(fm.is_base[f.test_ids])
        seen |= set(f.test_groups)
        assert f.accuracy == (f.tp + f.tn) / len(f.test_ids)
        assert 0 <= f.sensitivity <= 1 and 0 <= f.specificity <= 1
    assert seen == set(fm.groups)


def test_cross_validate_too_few_members():
    fm = an.FeatureMatrix(np.arange(10)[:, None], [0] * 7 + [1] * 3)
    with pytest.raises(ValueError, match="fewer than k"):
        an.cross_validate(fm, an.ForestConfig(n_trees=5), k=4)


def test_cross_validate_deterministic():
    fm = grouped_features(seed=3)
    cfg = an.ForestConfig(n_trees=10)
    a = an.cross_validate(fm, cfg, seed=5)
    b = an.cross_validate(fm, cfg, seed=5)
    assert a.aucs == b.aucs and a.accuracy == b.accuracy


def test_extract_features_matches_rows():
    class Inv:
        latent_dim = 2

        def invert_batch(self, images):
            return np.stack([images.mean(axis=(1, 2)), images.max(axis=(1, 2))], axis=1)

    from ginvp.synthdata import make_dataset

    ds = make_dataset(8, 16, seed=1, augment_data=True)
    fm = an.extract_features(Inv(), ds, batch_size=7)
    assert len(fm) == len(ds)
    for i, r in enumerate(ds.records):
        np.testing.assert_array_equal(fm.values[i], Inv().invert_batch(r.image[None])[0])
        assert fm.labels[i] == r.pvl_label and fm.groups[i] == r.group
