"""Regression trees, the forest, KNN and the rfmodel-v1 file."""

import json

import numpy as np
import pytest

from otdoa_uncertainty import radio_sim, rf, scenario
from otdoa_uncertainty.errors import InvalidInputError, ModelFormatError
from otdoa_uncertainty.rf import ForestParams, Leaf, RandomForestModel, Split

ALL_FEATURES = ForestParams(n_trees=1, max_depth=10, min_leaf_size=1, features_per_split=3, bootstrap=False)


def brute_force_predictions(X, Y, max_depth, min_leaf, depth=0):
    """Training predictions of an exhaustively searched tree."""
    leaf = np.tile([Y[:, 0].mean(), Y[:, 1].mean()], (len(X), 1))
    if depth >= max_depth or len(X) < 2 * min_leaf or np.all(Y == Y[0]):
        return leaf

    best = None
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            left = X[:, f] <= (lo + hi) / 2.0
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            sse = np.sum((Y[left] - Y[left].mean(axis=0)) ** 2) + np.sum((Y[~left] - Y[~left].mean(axis=0)) ** 2)
            if best is None or sse < best[0]:
                best = (sse, left)
    if best is None:
        return leaf

    left = best[1]
    out = np.empty_like(Y)
    out[left] = brute_force_predictions(X[left], Y[left], max_depth, min_leaf, depth + 1)
    out[~left] = brute_force_predictions(X[~left], Y[~left], max_depth, min_leaf, depth + 1)
    return out


def test_identical_targets_give_a_single_leaf():
    X = np.arange(12.0).reshape(6, 2)
    Y = np.tile([4.0, 9.0], (6, 1))
    assert rf.fit_tree(X, Y, ALL_FEATURES, np.random.default_rng(0)) == Leaf((4.0, 9.0))


def test_depth_zero_is_the_global_mean():
    X = np.arange(12.0).reshape(6, 2)
    Y = np.column_stack([np.arange(6.0), np.arange(6.0) * 2])
    tree = rf.fit_tree(X, Y, ForestParams(max_depth=0), np.random.default_rng(0))
    assert tree == Leaf((2.5, 5.0))


def test_root_splits_between_clusters():
    X = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [10.0, 0.0], [11.0, 0.0], [12.0, 0.0]])
    Y = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [50.0, 50.0], [51.0, 50.0], [50.0, 51.0]])
    tree = rf.fit_tree(X, Y, ALL_FEATURES, np.random.default_rng(0))
    assert isinstance(tree, Split)
    assert tree.feature_index == 0
    assert 3.0 < tree.threshold < 10.0


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("min_leaf", [1, 3])
def test_tree_matches_exhaustive_search(seed, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, (int(rng.integers(8, 21)), 3))
    Y = rng.uniform(0.0, 100.0, (len(X), 2))
    params = ForestParams(max_depth=4, min_leaf_size=min_leaf, features_per_split=3)
    tree = rf.fit_tree(X, Y, params, rng)

    predicted = np.array([rf.predict_tree(tree, x) for x in X])
    assert np.array_equal(predicted, brute_force_predictions(X, Y, 4, min_leaf))


def test_single_unbagged_deep_tree_reproduces_training_targets():
    rng = np.random.default_rng(1)
    X = rng.uniform(0.0, 1.0, (30, 3))
    Y = rng.uniform(0.0, 100.0, (30, 2))
    model = rf.fit_forest(X, Y, ForestParams(n_trees=1, max_depth=50, min_leaf_size=1, features_per_split=3, bootstrap=False), seed=3)
    mean, per_tree = rf.predict_rf(model, X[7])
    assert tuple(mean) == tuple(Y[7])
    assert per_tree.shape == (1, 2)


def test_bootstrap_draws_as_many_rows_as_the_training_set():
    rows = rf.bootstrap_rows(200, True, np.random.default_rng(3))
    assert len(rows) == 200
    assert rows.min() >= 0 and rows.max() < 200
    assert 110 <= len(np.unique(rows)) <= 144
    assert rf.bootstrap_rows(5, False, np.random.default_rng(3)).tolist() == [0, 1, 2, 3, 4]


def test_every_bagged_tree_sees_a_full_size_sample(monkeypatch):
    seen = []

    def record(X, Y, params, rng, depth=0):
        seen.append(len(np.unique(X, axis=0)) if len(X) == 60 else -1)
        return Leaf((0.0, 0.0))

    monkeypatch.setattr(rf, "fit_tree", record)
    rng = np.random.default_rng(4)
    rf.fit_forest(rng.uniform(0.0, 1.0, (60, 3)), rng.uniform(0.0, 9.0, (60, 2)), ForestParams(n_trees=5), seed=1)
    assert len(seen) == 5
    assert all(0 < n < 60 for n in seen)


def test_unbagged_tree_ignores_row_order():
    rng = np.random.default_rng(12)
    X = rng.uniform(0.0, 1.0, (40, 3))
    Y = rng.uniform(0.0, 50.0, (40, 2))
    order = rng.permutation(40)
    params = ForestParams(n_trees=1, max_depth=6, features_per_split=3, bootstrap=False)
    a = rf.fit_forest(X, Y, params, seed=2)
    b = rf.fit_forest(X[order], Y[order], params, seed=2)
    queries = rng.uniform(0.0, 1.0, (25, 3))
    for x in queries:
        np.testing.assert_allclose(rf.predict_rf(a, x)[0], rf.predict_rf(b, x)[0], rtol=1e-12)


def test_forest_is_deterministic_across_workers():
    rng = np.random.default_rng(2)
    X = rng.uniform(0.0, 1.0, (40, 4))
    Y = rng.uniform(0.0, 50.0, (40, 2))
    params = ForestParams(n_trees=6, max_depth=5)
    assert rf.fit_forest(X, Y, params, seed=8, workers=1) == rf.fit_forest(X, Y, params, seed=8, workers=3)
    assert rf.fit_forest(X, Y, params, seed=8) != rf.fit_forest(X, Y, params, seed=9)


def test_predictions_average_the_trees():
    identical = RandomForestModel((Leaf((1.0, 2.0)),) * 3, ForestParams(n_trees=3), 2)
    mean, per_tree = rf.predict_rf(identical, [0.0, 0.0])
    assert per_tree.tolist() == [[1.0, 2.0]] * 3
    assert mean.tolist() == [1.0, 2.0]

    pair = RandomForestModel((Leaf((0.0, 0.0)), Leaf((2.0, 4.0))), ForestParams(n_trees=2), 2)
    assert rf.predict_rf(pair, [0.0, 0.0])[0].tolist() == [1.0, 2.0]


def test_forest_mean_equals_mean_of_tree_predictions():
    rng = np.random.default_rng(5)
    X = rng.uniform(0.0, 1.0, (50, 3))
    Y = rng.uniform(0.0, 50.0, (50, 2))
    model = rf.fit_forest(X, Y, ForestParams(n_trees=7, max_depth=6), seed=1)
    x = rng.uniform(0.0, 1.0, 3)
    expected = np.mean([rf.predict_tree(tree, x) for tree in model.trees], axis=0)
    np.testing.assert_allclose(rf.predict_rf(model, x)[0], expected, rtol=1e-15)


def test_forest_rejects_wrong_feature_count():
    model = RandomForestModel((Leaf((0.0, 0.0)),), ForestParams(n_trees=1), 3)
    with pytest.raises(InvalidInputError):
        rf.predict_rf(model, [1.0, 2.0])


def test_forest_beats_centroid_on_simulated_data():
    d = scenario.build_indoor_open_office()
    ds = radio_sim.generate_dataset(d, scenario.ScenarioConfig(n_ues=300), seed=12)
    train, test = radio_sim.split_dataset(ds, 0.7, seed=13)
    model = rf.train_rf(train, ForestParams(n_trees=25), seed=14, workers=2)

    predicted = np.array([rf.predict_rf(model, tau)[0] for tau in test.toa_matrix])
    rmse = np.sqrt(np.mean(np.sum((predicted - test.positions) ** 2, axis=1)))
    baseline = np.sqrt(np.mean(np.sum((d.centroid - test.positions) ** 2, axis=1)))
    assert rmse < baseline


def knn_oracle(X, Y, x, k):
    scored = sorted((float(np.sqrt(np.sum((row - x) ** 2))), i) for i, row in enumerate(X))
    return Y[[i for _, i in scored[:k]]].mean(axis=0)


def test_knn():
    rng = np.random.default_rng(6)
    X = rng.uniform(0.0, 1.0, (10, 4))
    Y = rng.uniform(0.0, 50.0, (10, 2))
    nearest_self = rf.KnnModel(X, Y, k_neighbors=1)
    assert rf.predict_knn(nearest_self, X[4]).tolist() == Y[4].tolist()
    np.testing.assert_allclose(rf.predict_knn(rf.KnnModel(X, Y, 10), X[0]), Y.mean(axis=0))

    x = rng.uniform(0.0, 1.0, 4)
    np.testing.assert_allclose(rf.predict_knn(rf.KnnModel(X, Y, 3), x), knn_oracle(X, Y, x, 3))


def test_knn_ties_keep_lower_row():
    X = np.array([[1.0], [-1.0], [3.0]])
    Y = np.array([[10.0, 0.0], [20.0, 0.0], [30.0, 0.0]])
    assert rf.predict_knn(rf.KnnModel(X, Y, 1), [0.0]).tolist() == [10.0, 0.0]


def test_knn_needs_enough_rows():
    with pytest.raises(InvalidInputError):
        rf.KnnModel(np.zeros((2, 3)), np.zeros((2, 2)), k_neighbors=3)


def test_cross_validation_picks_from_grid(monkeypatch, caplog):
    monkeypatch.setattr(rf, "CV_TREES", (2, 4))
    monkeypatch.setattr(rf, "CV_DEPTHS", (1, 6))
    rng = np.random.default_rng(7)
    X = rng.uniform(0.0, 1.0, (60, 2))
    Y = np.column_stack([X[:, 0] * 100.0, X[:, 1] * 50.0])
    base = ForestParams(min_leaf_size=1)
    with caplog.at_level("INFO", logger="otdoa_uncertainty.rf"):
        chosen = rf.cross_validate(X, Y, base, seed=3)
    assert chosen.n_trees in (2, 4)
    assert chosen.max_depth == 6
    assert chosen.min_leaf_size == 1
    assert "CV selected" in caplog.text


def test_forest_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    model = rf.fit_forest(rng.uniform(0.0, 1.0, (30, 3)), rng.uniform(0.0, 9.0, (30, 2)), ForestParams(n_trees=3), seed=2)
    path = tmp_path / "models" / "rf_model.json"
    rf.save_forest(model, path)
    assert rf.load_forest(path) == model


def test_truncated_forest_file(tmp_path):
    path = tmp_path / "rf_model.json"
    doc = {"format": "rfmodel-v1", "params": {}, "n_features": 2, "trees": [[["split", 0, 0.5], ["leaf", 1.0, 2.0]]]}
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError, match="truncated"):
        rf.load_forest(path)


def test_forest_file_missing_fields(tmp_path):
    path = tmp_path / "rf_model.json"
    path.write_text(json.dumps({"format": "rfmodel-v1", "trees": []}))
    with pytest.raises(ModelFormatError, match="malformed"):
        rf.load_forest(path)
