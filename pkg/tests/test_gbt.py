import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcsboost.features import FeatureMatrix
from rcsboost.gbt import (Ensemble, ModelError, SchemaMismatch, TrainConfig, Tree, default_grid,
                          find_best_split, grid_search, log_loss, predict_margin, predict_proba, rfe, sigmoid,
                          train, validation_auprc)
from rcsboost.gbt.train import Presorted, scan
from rcsboost.evaluate import average_precision

from oracles import brute_best_split

ONE = TrainConfig(n_rounds=1, max_depth=1, learning_rate=1.0, reg_lambda=1.0, min_child_weight=0.0,
                  early_stopping_rounds=None)


def random_node(rng, n_max=64, p_max=8, null_rate=0.2):
    n = int(rng.integers(2, n_max + 1))
    p = int(rng.integers(1, p_max + 1))
    X = np.where(rng.random((n, p)) < 0.5, rng.integers(0, 5, (n, p)).astype(float), rng.normal(size=(n, p)))
    X[rng.random((n, p)) < null_rate] = np.nan
    prob = rng.uniform(0.05, 0.95, n)
    y = rng.random(n) < 0.4
    return X, prob - y, prob * (1 - prob)


@settings(max_examples=120)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 10.0]), st.sampled_from([0.0, 0.05]),
       st.sampled_from([0.0, 0.3]))
def test_split_matches_brute_force(backend, seed, lam, gamma, mcw):
    rng = np.random.default_rng(seed)
    X, g, h = random_node(rng)
    rows = np.flatnonzero(rng.random(len(g)) < 0.8)
    if len(rows) == 0:
        rows = np.arange(len(g))
    for j in range(X.shape[1]):
        got = find_best_split(X, g, h, rows, j, reg_lambda=lam, gamma=gamma, min_child_weight=mcw)
        want = brute_best_split(X[rows, j], g[rows], h[rows], lam, gamma, mcw)
        if want is None:
            assert got is None
            continue
        assert got is not None
        assert (got.threshold, got.default_left) == want[:2]
        assert got.gain == pytest.approx(want[2], rel=1e-12, abs=1e-15)


def test_scan_picks_lowest_column_on_ties(backend):
    X = np.array([[0, 0], [0, 0], [1, 1], [1, 1]], dtype=float)
    g = np.array([0.5, 0.5, -0.5, -0.5])
    h = np.full(4, 0.25)
    pre = Presorted(X)
    gain, col, thr, left = scan(pre, np.array([0, 1]), np.zeros(4, np.int64), g, h, np.array([0.0]),
                                np.array([1.0]), TrainConfig(min_child_weight=0.0))
    assert col[0] == 0 and thr[0] == 0.5 and left[0]


def test_identical_values_and_large_gamma_give_no_split():
    X = np.ones((5, 1))
    g = np.array([0.5, -0.5, 0.5, -0.5, 0.5])
    h = np.full(5, 0.25)
    assert find_best_split(X, g, h, np.arange(5), 0) is None
    X2 = np.arange(5.0)[:, None]
    assert find_best_split(X2, g, h, np.arange(5), 0, gamma=1e6) is None


def test_null_and_zero_are_distinct():
    x = np.array([np.nan, np.nan, 0.0, 0.0, 1.0, 1.0, 1.0])
    y = np.array([1, 1, 0, 0, 0, 0, 1])
    g, h = 0.5 - y, np.full(7, 0.25)
    with_null = find_best_split(x[:, None], g, h, np.arange(7), 0, reg_lambda=0.0)
    zero_fill = find_best_split(np.nan_to_num(x)[:, None], g, h, np.arange(7), 0, reg_lambda=0.0)
    assert with_null is not None and zero_fill is not None
    assert with_null.gain != pytest.approx(zero_fill.gain)
    assert with_null.default_left is False  # nulls (both positives) go with the 1s
    cfg = TrainConfig(n_rounds=3, max_depth=2, reg_lambda=0.0, min_child_weight=0.0, early_stopping_rounds=None)
    m_null = train((x[:, None], y), cfg)
    m_zero = train((np.nan_to_num(x)[:, None], y), cfg)
    probe = np.array([[np.nan]])
    assert predict_margin(m_null, probe)[0] != predict_margin(m_zero, np.array([[0.0]]))[0]


def test_hand_computed_stump(backend):
    # four positives with x=1, four negatives with x=0; at p=0.5, G = -/+2 and H = 1 per side
    X = np.array([[1.0]] * 4 + [[0.0]] * 4)
    y = np.array([1] * 4 + [0] * 4)
    m = train((X, y), ONE)
    t = m.trees[0]
    assert t.threshold[0] == 0.5
    assert t.value.tolist() == [0.0, -1.0, 1.0]
    assert t.cover.tolist() == [2.0, 1.0, 1.0]
    assert predict_margin(m, np.array([[0.0], [1.0], [np.nan]])).tolist()[:2] == [-1.0, 1.0]


def test_zero_rounds_is_constant_base_score():
    X = np.random.default_rng(0).normal(size=(10, 3))
    y = np.arange(10) % 2
    m = train((X, y), TrainConfig(n_rounds=0, base_score=0.7, early_stopping_rounds=None))
    assert m.n_trees == 0
    assert np.all(predict_proba(m, X) == sigmoid(np.array(0.7)))
    assert predict_proba(train((X, y), TrainConfig(n_rounds=0)), X[:1])[0] == 0.5


def _two_tree_ensemble():
    a = Tree.from_nested({"id": 0, "feature": 0, "threshold": 2.0, "default": "Right", "gain": 1.0, "cover": 4,
                          "left": {"id": 1, "leaf": 0.25, "cover": 2}, "right": {"id": 2, "leaf": -0.5, "cover": 2}})
    b = Tree.from_nested({"id": 0, "feature": 1, "threshold": 0.0, "default": "Left", "gain": 1.0, "cover": 4,
                          "left": {"id": 1, "feature": 0, "threshold": 1.0, "default": "Left", "gain": 0.5,
                                   "cover": 3, "left": {"id": 3, "leaf": 1.0, "cover": 1},
                                   "right": {"id": 4, "leaf": 2.0, "cover": 2}},
                          "right": {"id": 2, "leaf": -1.0, "cover": 1}})
    return Ensemble((a, b), 0.1, 1.0, "", 2)


@pytest.mark.parametrize("row,expected", [
    ([1.5, -1.0], 0.1 + 0.25 + 2.0),
    ([3.0, 5.0], 0.1 - 0.5 - 1.0),
    ([np.nan, np.nan], 0.1 - 0.5 + 1.0),  # tree a: Null -> Right; tree b: Null -> Left, then Null -> Left
    ([0.5, np.nan], 0.1 + 0.25 + 1.0),
    ([2.0, 0.0], 0.1 - 0.5 - 1.0),  # values equal to a threshold go right
])
def test_hand_traversal(backend, row, expected):
    m = _two_tree_ensemble()
    assert predict_margin(m, np.array([row]))[0] == pytest.approx(expected, abs=1e-15)


def _data(seed, n=300, p=6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    X[rng.random((n, p)) < 0.2] = np.nan
    z = 1.5 * np.nan_to_num(X[:, 0]) - np.nan_to_num(X[:, 1]) + 0.5 * np.isnan(X[:, 2]) + rng.normal(size=n)
    return X, (z > 0.5).astype(int)


@pytest.mark.parametrize("seed", range(5))
def test_training_loss_never_increases(backend, seed):
    X, y = _data(seed)
    losses = []
    cfg = TrainConfig(n_rounds=50, max_depth=3, learning_rate=0.3, gamma=0.0, min_child_weight=0.0,
                      early_stopping_rounds=None)
    train((X, y), cfg, callback=lambda r, margin: losses.append(log_loss(y, margin)))
    assert len(losses) == 50
    assert all(b <= a + 1e-15 for a, b in zip([log_loss(y, np.zeros(len(y)))] + losses, losses))


def test_monotone_transform_preserves_partitions(backend):
    X, y = _data(3)
    cfg = TrainConfig(n_rounds=20, max_depth=4, early_stopping_rounds=None)
    X2 = X.copy()
    X2[:, 0] = np.exp(X[:, 0]) * 3.0 + 7.0
    m1, m2 = train((X, y), cfg), train((X2, y), cfg)
    assert np.array_equal(predict_margin(m1, X), predict_margin(m2, X2))
    th1 = [t.threshold[t.feature == 0] for t in m1.trees]
    th2 = [t.threshold[t.feature == 0] for t in m2.trees]
    assert any(len(a) and not np.array_equal(a, b) for a, b in zip(th1, th2))


def test_thread_count_and_backend_invariance():
    from rcsboost import _kernels
    X, y = _data(1, n=500, p=12)
    cfg = TrainConfig(n_rounds=15, max_depth=4, early_stopping_rounds=None)
    outs = []
    for name in _kernels.available():
        with _kernels.backend_scope(name):
            for threads in (1, 3):
                outs.append(json.dumps(train((X, y), cfg, threads=threads).to_json(), sort_keys=True))
    assert len(set(outs)) == 1


def test_serialization_roundtrip(tmp_path):
    X, y = _data(2)
    m = train((X, y), TrainConfig(n_rounds=8, max_depth=3, early_stopping_rounds=None))
    m.save(tmp_path / "m.json")
    back = Ensemble.load(tmp_path / "m.json")
    assert np.array_equal(predict_margin(back, X), predict_margin(m, X))
    assert back.to_json() == m.to_json()
    d = m.to_json()
    d["version"] = 99
    with pytest.raises(ModelError):
        Ensemble.from_json(d)


def test_schema_fingerprint_is_enforced():
    X, y = _data(4)
    a = FeatureMatrix.from_dense(X, y)
    b = FeatureMatrix.from_dense(X, y, names=[f"z{j}" for j in range(X.shape[1])])
    m = train(a, TrainConfig(n_rounds=2, early_stopping_rounds=None))
    predict_margin(m, a)
    with pytest.raises(SchemaMismatch):
        predict_margin(m, b)
    with pytest.raises(SchemaMismatch):
        predict_margin(m, X[:, :3])
    with pytest.raises(SchemaMismatch):
        train(a, TrainConfig(n_rounds=2), b)


def test_one_class_and_bad_config_rejected():
    X = np.zeros((4, 1))
    with pytest.raises(ModelError):
        train((X, np.ones(4)), TrainConfig())
    for bad in ({"learning_rate": 0.0}, {"learning_rate": 1.5}, {"reg_lambda": -1}, {"max_depth": 0},
                {"gamma": -0.1}):
        with pytest.raises(ModelError):
            TrainConfig(**bad)


def test_early_stopping_truncates_to_best_round():
    X, y = _data(5)
    Xv, yv = _data(6)
    m = train((X, y), TrainConfig(n_rounds=200, max_depth=6, learning_rate=0.3, early_stopping_rounds=5),
              (Xv, yv))
    hist = m.validation_history
    assert m.n_trees == m.best_round == int(np.argmax(hist)) + 1
    assert len(hist) <= m.best_round + 5
    assert validation_auprc(m, (Xv, yv)) == pytest.approx(max(hist), abs=1e-15)


def test_base_score_from_prevalence():
    X, y = _data(7)
    m = train((X, y), TrainConfig(n_rounds=0, base_score_from_prevalence=True))
    assert sigmoid(np.array(m.base_score)) == pytest.approx(y.mean())


def test_grid_search_selection_rules():
    X, y = _data(8)
    Xv, yv = _data(9)
    grid = [TrainConfig(n_rounds=30, max_depth=d, learning_rate=eta, early_stopping_rounds=5)
            for d in (2, 4) for eta in (0.1, 0.3)]
    res = grid_search((X, y), (Xv, yv), grid)
    # recompute every cell independently
    scores = []
    for cfg in grid:
        m = train((X, y), cfg, (Xv, yv))
        scores.append((-average_precision(predict_margin(m, Xv), yv), m.n_trees))
    assert res.best_index == min(range(len(grid)), key=lambda i: (*scores[i], i))
    assert [c.auprc for c in res.table] == [-s[0] for s in scores]
    single = grid_search((X, y), (Xv, yv), grid[:1])
    assert single.best_index == 0
    dup = grid_search((X, y), (Xv, yv), [grid[1], grid[1]])
    assert dup.best_index == 0


def test_grid_search_records_failed_cells():
    X, y = _data(8)
    Xv, yv = _data(9)
    ok = TrainConfig(n_rounds=5, early_stopping_rounds=None)
    res = grid_search((X, y), (Xv, yv), [ok, ok])
    assert all(c.error is None for c in res.table)
    with pytest.raises(ValueError):
        grid_search((X, y), (Xv, yv), [])


def test_rfe_keeps_planted_columns_and_is_reproducible():
    rng = np.random.default_rng(11)
    n, p = 600, 20
    X = rng.normal(size=(n, p))
    y = (2 * X[:, 3] - 1.5 * X[:, 7] + 0.3 * rng.normal(size=n) > 0.5).astype(int)
    tr, va = (X[:400], y[:400]), (X[400:], y[400:])
    cfg = TrainConfig(n_rounds=30, max_depth=3, early_stopping_rounds=5)
    a = rfe(tr, va, cfg, 0.25, 4)
    b = rfe(tr, va, cfg, 0.25, 4)
    assert a == b
    assert {3, 7} <= set(a.columns)
    sizes = [s.n_features for s in a.trajectory]
    assert sizes[0] == p and sizes[-1] == 4 and sizes == sorted(sizes, reverse=True)
    best = max(a.trajectory, key=lambda s: (s.auprc, -s.n_features))
    assert a.columns == best.columns


def test_rfe_single_iteration_returns_full_set():
    X, y = _data(12, p=5)
    res = rfe((X, y), _data(13, p=5), TrainConfig(n_rounds=5, early_stopping_rounds=None), min_features=5)
    assert res.columns == tuple(range(5)) and len(res.trajectory) == 1


def test_rfe_never_drops_protected_columns():
    X, y = _data(14, p=10)
    res = rfe((X, y), _data(15, p=10), TrainConfig(n_rounds=5, early_stopping_rounds=None), 0.5, 2,
              protected=[8, 9])
    assert all({8, 9} <= set(s.columns) for s in res.trajectory)


def test_default_grid_shape():
    grid = default_grid()
    assert len(grid) == 18
    assert {c.max_depth for c in grid} == {3, 5, 7}
    assert {c.learning_rate for c in grid} == {0.05, 0.1, 0.3}
    assert {c.reg_lambda for c in grid} == {1.0, 10.0}
