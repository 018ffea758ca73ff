import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_network
from gridshed.fsa_classifiers import (ClassifierModel, _raw_input, aggregate_signal, aggregation_rows,
                                      confusion_metrics, evaluate, load_classifier, predict, save_classifier,
                                      train_classifier, train_decision_tree, train_nn_classifier, train_svm,
                                      tree_depth)
from gridshed.grid_model import graph_shift_operator


def as_feats(cols):
    """(M, k) columns -> (M, 1, 4) feature tensors padded with constants."""
    cols = np.atleast_2d(np.asarray(cols, dtype=float).T).T
    out = np.zeros((cols.shape[0], 1, 4))
    out[:, 0, :cols.shape[1]] = cols
    return out


PATH_S = graph_shift_operator(make_network(3, [(0, 1), (1, 2)]), "adjacency")


def test_aggregation_examples():
    x = np.array([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(aggregate_signal(PATH_S, x, 0, 3), [1, 0, 1])
    np.testing.assert_array_equal(aggregate_signal(PATH_S, x, 0, 1), [1])
    np.testing.assert_array_equal(aggregate_signal(np.zeros((3, 3)), np.array([2.0, 5, 7]), 0, 3), [2, 0, 0])
    with pytest.raises(ValueError):
        aggregation_rows(PATH_S, 5, 3)


def test_aggregation_batch_shapes(rng):
    x = rng.normal(size=(7, 3, 4))
    out = aggregate_signal(PATH_S, x, 1, 3)
    assert out.shape == (7, 3, 4)
    np.testing.assert_allclose(out[2], aggregate_signal(PATH_S, x[2], 1, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_aggregation_linear_property(seed, a, b):
    rng = np.random.default_rng(seed)
    S = graph_shift_operator(make_network(5, [(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)]))
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(aggregate_signal(S, a * x + b * y, 1, 3),
                               a * aggregate_signal(S, x, 1, 3) + b * aggregate_signal(S, y, 1, 3), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_aggregation_locality_property(seed):
    # buses farther than n_max - 1 hops from the node cannot influence the sequence
    rng = np.random.default_rng(seed)
    S = graph_shift_operator(make_network(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]))
    x = rng.normal(size=(6, 4))
    y = x.copy()
    y[3:] = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(aggregate_signal(S, x, 0, 3), aggregate_signal(S, y, 0, 3))


def test_metrics_examples():
    y = np.array([1] * 65 + [0] * 35)
    m = confusion_metrics(y, y)
    assert (m.accuracy, m.precision, m.recall) == (100, 100, 100)
    m = confusion_metrics(np.ones(100), y)
    assert m.accuracy == 65 and m.recall == 100 and m.precision == 65
    m = confusion_metrics(np.zeros(100), y)
    assert m.precision == 0 and m.degenerate


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_metrics_identity_property(pairs):
    pred, lab = np.array(pairs).T
    m = confusion_metrics(pred, lab)
    tp = np.sum((pred == 1) & (lab == 1))
    assert m.accuracy == pytest.approx(100 * np.mean(pred == lab))
    if lab.sum():
        assert m.recall == pytest.approx(100 * tp / lab.sum())
    # accuracy is a weighted blend of per-class recalls
    n1, n0 = lab.sum(), len(lab) - lab.sum()
    tn = np.sum((pred == 0) & (lab == 0))
    assert m.accuracy * len(lab) == pytest.approx(100 * (tp + tn))
    assert 0 <= m.precision <= 100 and n1 + n0 == len(lab)


def test_tree_threshold_depth1():
    x = as_feats(np.arange(20.0))
    y = (np.arange(20) >= 8).astype(int)
    m = train_decision_tree(x, y, min_leaf=1)
    assert tree_depth(m) == 1
    assert np.all(predict(m, x)[1] == y)


def test_tree_pure_and_constant():
    x = as_feats(np.random.default_rng(0).normal(size=30))
    m = train_decision_tree(x, np.ones(30, dtype=int))
    assert tree_depth(m) == 0
    assert np.all(predict(m, as_feats([-100.0, 100.0]))[1] == 1)


def test_tree_xor():
    x = as_feats([[0, 0], [0, 1], [1, 0], [1, 1]])
    y = np.array([0, 1, 1, 0])
    m = train_decision_tree(x, y, min_leaf=1)
    assert np.all(predict(m, x)[1] == y)


def test_svm_two_points():
    x = as_feats([[-1.0], [1.0]])
    m = train_svm(x, np.array([0, 1]), epochs=300, batch_size=2)
    z = m.prepare(x)
    score = z @ m.weights[:-1] + m.weights[-1]
    assert score[0] < 0 < score[1]


def test_svm_constant_features_majority():
    x = np.ones((40, 1, 4))
    y = np.array([1] * 30 + [0] * 10)
    m = train_svm(x, y, epochs=50)
    assert np.all(predict(m, x)[1] == 1)


def test_svm_blobs():
    rng = np.random.default_rng(3)
    def blobs(n):
        a = rng.normal([-2.5, 0], 1, (n, 2))
        b = rng.normal([2.5, 0], 1, (n, 2))
        return as_feats(np.r_[a, b]), np.r_[np.zeros(n, int), np.ones(n, int)]
    xtr, ytr = blobs(200)
    xte, yte = blobs(500)
    m = train_svm(xtr, ytr, epochs=100)
    assert evaluate(m, xte, yte).accuracy >= 99
    obj = m.history["objective"]
    assert obj[-1] < obj[0]


def test_input_shapes_68_bus():
    x = np.zeros((2, 68, 4))
    assert _raw_input("mlp", x, None).shape == (2, 272)
    assert _raw_input("cnn", x, None).shape == (2, 4, 68)
    rows = aggregation_rows(np.eye(68, k=1) + np.eye(68, k=-1), 0, 3)
    assert _raw_input("gnn", x, rows).shape == (2, 4, 3)


def synthetic(n=20, n_bus=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, n_bus, 4))
    return x, (x[:, 0, 0] > 0).astype(int)


@pytest.mark.parametrize("arch", ["mlp", "cnn", "gnn"])
def test_one_epoch_roundtrip(arch, tmp_path):
    x, y = synthetic()
    S = graph_shift_operator(make_network(5, [(0, 1), (1, 2), (2, 3), (3, 4)]))
    kw = {"shift": S, "agg_node": 1} if arch == "gnn" else {}
    m = train_nn_classifier((x[:15], y[:15]), (x[15:], y[15:]), arch, epochs=1, **kw)
    save_classifier(m, tmp_path / "m")
    again = load_classifier(tmp_path / "m")
    np.testing.assert_array_equal(again.predict_proba(x), m.predict_proba(x))
    save_classifier(again, tmp_path / "m2")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


@pytest.mark.parametrize("kind", ["dt", "svm"])
def test_classic_roundtrip(kind, tmp_path):
    x, y = synthetic(60)
    m = train_decision_tree(x, y) if kind == "dt" else train_svm(x, y, epochs=5)
    save_classifier(m, tmp_path / "m")
    again = load_classifier(tmp_path / "m")
    np.testing.assert_array_equal(again.predict_proba(x), m.predict_proba(x))


def test_predict_deterministic_and_shape_check():
    x, y = synthetic(40)
    m = train_decision_tree(x, y)
    np.testing.assert_array_equal(m.predict_proba(x[:1]), m.predict_proba(x[:1]))
    with pytest.raises(ValueError):
        m.predict_proba(np.zeros((1, 6, 4)))


def test_mask_imputes_training_mean():
    x, y = synthetic(40)
    m = train_decision_tree(x, y)
    mask = np.array([True, False, False, False, False])
    filled = x.copy()
    filled[:, 0] = m.bus_mean[0]
    np.testing.assert_array_equal(m.predict_proba(x, mask), m.predict_proba(filled))


def test_train_classifier_on_dataset(small_ds, case9):
    for kind in ("dt", "svm"):
        m = train_classifier(kind, small_ds)
        assert m.input_shape == (9, 4)
    m = train_classifier("gnn", small_ds, net=case9, epochs=2)
    assert m.agg_node in (3, 5, 7)
    with pytest.raises(ValueError):
        train_classifier("gnn", small_ds, epochs=1)


def test_bad_labels_rejected():
    x, _ = synthetic(10)
    with pytest.raises(ValueError):
        train_decision_tree(x, np.full(10, 2))
