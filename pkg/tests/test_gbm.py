import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from conftest import random_dataset, tiny_schema
from data import Dataset, SchemaError
from gbm import (GAIN_TOL, BoostModel, DegenerateClassError, FitError, GbmConfig, deviance_grad_hess, fit_tree,
                 load_model, predict_class, predict_proba, save_model, softmax, train)

scores_3 = st.lists(st.floats(-50, 50), min_size=3, max_size=3)


def test_config_validation():
    with pytest.raises(ValueError):
        GbmConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        GbmConfig(subsample=1.5)
    with pytest.raises(ValueError):
        GbmConfig(n_classes=1)
    with pytest.raises(ValueError):
        GbmConfig.from_dict({'n_trees': 10})
    config = GbmConfig(n_rounds=7, max_depth=2)
    assert GbmConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()
    assert config.replace(seed=3).seed == 3


@given(scores_3, st.floats(-1e3, 1e3))
def test_softmax_is_shift_invariant(scores, shift):
    p = softmax(scores)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(np.array(scores) + shift), p, atol=1e-12)


def test_softmax_does_not_overflow():
    p = softmax([1000.0, 0.0, -1000.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


def _row_deviance(scores, label, weight):
    return weight * (logsumexp(scores) - scores[label])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(200):
        scores = rng.uniform(-5, 5, size=3)
        label = int(rng.integers(0, 3))
        weight = float(rng.uniform(0.1, 5.0))
        grad, hess = deviance_grad_hess(label, softmax(scores), weight)
        for k in range(3):
            step = np.zeros(3)
            step[k] = h
            fd = (_row_deviance(scores + step, label, weight) - _row_deviance(scores - step, label, weight)) / (2 * h)
            assert abs(fd - grad[k]) <= 1e-6 * max(1.0, abs(grad[k]))
            g_plus, _ = deviance_grad_hess(label, softmax(scores + step), weight)
            g_minus, _ = deviance_grad_hess(label, softmax(scores - step), weight)
            assert abs((g_plus[k] - g_minus[k]) / (2 * h) - hess[k]) <= 1e-6 * max(1.0, abs(hess[k]))


def brute_force_tree(features, grads, hess, reg_lambda, min_child_weight, max_depth):
    """Exhaustive split search with the same node layout as fit_tree (preorder, left first)."""
    nodes = []

    def grow(rows, depth):
        g_sum = np.sum(grads[rows])
        h_sum = np.sum(hess[rows])
        node = len(nodes)
        nodes.append([-1, 0.0, -1, -1, -g_sum / (h_sum + reg_lambda), 0.0, h_sum])
        if depth >= max_depth or rows.shape[0] < 2:
            return node
        parent = g_sum * g_sum / (h_sum + reg_lambda)
        best, best_gain = None, 0.0
        for j in range(features.shape[1]):
            values = np.unique(features[rows, j])
            candidates = []
            for a, b in zip(values[:-1], values[1:]):
                threshold = 0.5 * (a + b)
                left = rows[features[rows, j] < threshold]
                g_left, h_left = np.sum(grads[left]), np.sum(hess[left])
                g_right, h_right = g_sum - g_left, h_sum - h_left
                if h_left < min_child_weight or h_right < min_child_weight:
                    continue
                gain = 0.5 * (g_left ** 2 / (h_left + reg_lambda) + g_right ** 2 / (h_right + reg_lambda) - parent)
                candidates.append((threshold, gain))
            if not candidates:
                continue
            top = max(gain for _, gain in candidates)
            threshold, gain = [c for c in candidates if c[1] >= top - GAIN_TOL * max(1.0, abs(top))][0]
            if gain > best_gain + GAIN_TOL * max(1.0, abs(best_gain)):
                best, best_gain = (j, threshold), gain
        if best is None:
            return node
        j, threshold = best
        go_left = features[rows, j] < threshold
        nodes[node][0:2] = [j, threshold]
        nodes[node][5] = best_gain
        nodes[node][2] = grow(rows[go_left], depth + 1)
        nodes[node][3] = grow(rows[~go_left], depth + 1)
        return node

    grow(np.arange(features.shape[0]), 0)
    return [np.array(column) for column in zip(*nodes)]


def test_split_search_matches_brute_force():
    rng = np.random.default_rng(42)
    for case in range(100):
        n = int(rng.integers(2, 33))
        n_features = int(rng.integers(1, 4))
        features = rng.integers(0, 6, size=(n, n_features)).astype(np.float64)
        grads = rng.normal(size=n)
        hess = rng.uniform(0.1, 1.0, size=n)
        reg_lambda = float(rng.choice([0.0, 1.0]))
        min_child_weight = float(rng.choice([0.0, 0.5]))
        max_depth = int(rng.integers(1, 3))
        config = GbmConfig(max_depth=max_depth, min_child_weight=min_child_weight, reg_lambda=reg_lambda)
        tree = fit_tree(features, grads, hess, config)
        feature, threshold, left, right, value, gain, cover = brute_force_tree(
            features, grads, hess, reg_lambda, min_child_weight, max_depth)
        assert np.array_equal(tree.feature, feature), case
        assert np.array_equal(tree.threshold, threshold), case
        assert np.array_equal(tree.left, left), case
        assert np.array_equal(tree.right, right), case
        assert np.allclose(tree.value, value, rtol=0, atol=1e-10), case
        assert np.allclose(tree.gain, gain, rtol=1e-9, atol=1e-12), case


def test_fit_tree_rejects_bad_input():
    config = GbmConfig()
    with pytest.raises(FitError):
        fit_tree(np.zeros((0, 2)), [], [], config)
    with pytest.raises(FitError):
        fit_tree(np.zeros((2, 1)), [0.0, 1.0], [1.0, -1.0], config)


def test_split_routing_and_threshold():
    features = np.array([[0.0], [1.0], [2.0], [3.0]])
    tree = fit_tree(features, np.array([-1.0, -1.0, 1.0, 1.0]), np.ones(4), GbmConfig(max_depth=1, min_child_weight=0))
    assert tree.feature[0] == 0
    assert tree.threshold[0] == 1.5
    assert np.array_equal(tree.predict(np.array([[1.4999], [1.5]])) > 0, [True, False])


def _assert_same_ensemble(a, b, atol):
    assert np.allclose(a.base_scores, b.base_scores, rtol=0, atol=atol)
    assert a.n_rounds == b.n_rounds
    for trees_a, trees_b in zip(a.rounds, b.rounds):
        for ta, tb in zip(trees_a, trees_b):
            assert np.array_equal(ta.feature, tb.feature)
            assert np.array_equal(ta.threshold, tb.threshold)
            assert np.array_equal(ta.left, tb.left)
            assert np.allclose(ta.value, tb.value, rtol=0, atol=atol)


def test_integer_weights_equal_duplicated_rows():
    config = GbmConfig(n_rounds=3, max_depth=2, subsample=1.0, min_child_weight=0.0)
    for seed in range(20):
        data = random_dataset(seed, 24, integer_weights=True)
        repeats = data.weights.astype(np.int64)
        duplicated = Dataset(data.schema, np.repeat(data.features, repeats, axis=0),
                             np.repeat(data.labels, repeats), np.repeat(data.groups, repeats), n_classes=3)
        _assert_same_ensemble(train(data, config), train(duplicated, config), 1e-9)


def test_global_weight_scale_is_invariant_without_regularisation():
    config = GbmConfig(n_rounds=3, max_depth=2, subsample=1.0, min_child_weight=0.0, reg_lambda=0.0)
    data = random_dataset(5, 40)
    scaled = data.replace(weights=data.weights * 3.0)
    _assert_same_ensemble(train(data, config), train(scaled, config), 1e-8)


def test_training_is_deterministic():
    data = random_dataset(8, 60)
    config = GbmConfig(n_rounds=5, max_depth=2, subsample=0.7, seed=11)
    assert train(data, config).to_dict() == train(data, config).to_dict()
    other = train(data, config.replace(seed=12)).to_dict()
    assert other['trees'] != train(data, config).to_dict()['trees']


def test_zero_rounds_predicts_training_proportions():
    data = random_dataset(4, 30)
    model = train(data, GbmConfig(n_rounds=0))
    totals = data.class_weight_totals()
    assert np.allclose(model.predict_proba_matrix(data.features), totals / totals.sum())


def test_ties_go_to_the_lowest_class():
    schema = tiny_schema()
    data = Dataset(schema, np.zeros((3, 3)), [0, 1, 2], ['W', 'W', 'B'])
    model = train(data, GbmConfig(n_rounds=0))
    assert predict_class(model, np.zeros(3)) == 0


def test_training_rejects_degenerate_inputs(schema):
    data = Dataset(schema, np.zeros((3, 3)), [0, 1, 1], ['W'] * 3, n_classes=3)
    with pytest.raises(DegenerateClassError):
        train(data, GbmConfig(n_rounds=1))
    empty = Dataset(schema, np.zeros((0, 3)), [], [], n_classes=3)
    with pytest.raises(FitError):
        train(empty, GbmConfig(n_rounds=1))


def test_group_tags_never_reach_the_model():
    data = random_dataset(9, 80)
    config = GbmConfig(n_rounds=4, max_depth=3, subsample=0.8, seed=1)
    model = train(data, config)
    relabelled = data.replace(groups=np.where(data.groups == 'W', 'B', 'W'))
    assert train(relabelled, config).to_dict()['trees'] == model.to_dict()['trees']

    rng = np.random.default_rng(0)
    rows = rng.integers(0, 6, size=(1000, 3)).astype(np.float64)
    white = Dataset(data.schema, rows, np.zeros(1000, dtype=int), ['W'] * 1000, n_classes=3)
    black = Dataset(data.schema, rows, np.zeros(1000, dtype=int), ['B'] * 1000, n_classes=3)
    assert np.array_equal(model.predict_proba_matrix(white.features), model.predict_proba_matrix(black.features))


def test_predict_checks_vector_length():
    model = train(random_dataset(1, 20), GbmConfig(n_rounds=1))
    with pytest.raises(SchemaError):
        predict_proba(model, np.zeros(4))
    p = predict_proba(model, np.zeros(3))
    assert p.sum() == pytest.approx(1.0)


def test_save_and_load_round_trip(tmp_path):
    data = random_dataset(2, 50)
    model = train(data, GbmConfig(n_rounds=4, max_depth=2), training_group='W')
    path = str(tmp_path / 'model.json')
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.to_dict() == model.to_dict()
    assert loaded.training_group == 'W'
    assert np.array_equal(loaded.predict_proba_matrix(data.features), model.predict_proba_matrix(data.features))


def test_model_artifact_rejects_schema_tampering():
    model = train(random_dataset(2, 30), GbmConfig(n_rounds=1))
    payload = model.to_dict()
    payload['schema']['features'][0]['name'] = 'renamed'
    with pytest.raises(SchemaError):
        BoostModel.from_dict(payload)


def test_callback_sees_every_round():
    seen = []
    train(random_dataset(3, 30), GbmConfig(n_rounds=4, max_depth=2), callback=lambda r, d: seen.append(r))
    assert seen == [1, 2, 3, 4]


@pytest.mark.slow
def test_training_deviance_never_increases(population):
    config = GbmConfig(subsample=1.0)
    model = train(population.subset(np.arange(5000)), config)
    trace = np.array(model.train_trace)
    assert len(trace) == config.n_rounds + 1
    assert np.all(np.diff(trace) <= 1e-9 * trace[:-1])


@given(st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_probabilities_are_a_distribution(seed):
    data = random_dataset(seed, 30)
    model = train(data, GbmConfig(n_rounds=2, max_depth=2, seed=seed))
    p = model.predict_proba_matrix(data.features)
    assert np.all(p > 0)
    assert np.allclose(p.sum(axis=1), 1.0)
