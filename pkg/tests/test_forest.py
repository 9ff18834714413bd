import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridst.forest import ForestConfig, best_split, fit_forest, predict


def sse_split_oracle(x, y, min_leaf):
    """Brute-force best threshold on one feature by total within-child SSE."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    best = (np.inf, None)
    for k in range(min_leaf, len(x) - min_leaf + 1):
        if xs[k - 1] == xs[k]:
            continue
        sse = ys[:k].var() * k + ys[k:].var() * (len(x) - k)
        if sse < best[0] - 1e-12:
            best = (sse, 0.5 * (xs[k - 1] + xs[k]))
    return best


class TestSplit:
    def test_step_function_split(self):
        x = np.arange(10, dtype=float)
        y = np.where(x < 4, 0.0, 1.0)
        f, t, gain = best_split(x[:, None], y, min_leaf=1)
        assert (f, t) == (0, 3.5)
        assert gain == pytest.approx(y.var() * 10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), min_leaf=st.integers(1, 6))
    def test_matches_brute_force(self, seed, min_leaf):
        rng = np.random.default_rng(seed)
        x = np.round(rng.normal(size=30), 1)
        y = rng.normal(size=30) + (x > 0)
        f, t, gain = best_split(x[:, None], y, min_leaf=min_leaf)
        sse, thr = sse_split_oracle(x, y, min_leaf)
        if thr is None:
            assert f is None
        else:
            assert t == pytest.approx(thr)
            assert gain == pytest.approx(y.var() * 30 - sse, abs=1e-9)

    def test_tie_prefers_lowest_feature(self):
        x = np.arange(8, dtype=float)
        X = np.column_stack([x, x, x])
        y = (x > 3).astype(float)
        f, t, _ = best_split(X, y, min_leaf=1)
        assert f == 0 and t == 3.5
        f, _, _ = best_split(X, y, features=[2, 1], min_leaf=1)
        assert f == 1

    def test_no_split_possible(self):
        X = np.ones((10, 2))
        assert best_split(X, np.arange(10.0))[0] is None
        assert best_split(np.arange(6.0)[:, None], np.arange(6.0), min_leaf=4)[0] is None


class TestForest:
    def test_config_mtry(self):
        assert ForestConfig().resolve_mtry(7) == 2
        assert ForestConfig().resolve_mtry(2) == 1
        with pytest.raises(ValueError):
            ForestConfig(mtry=9).resolve_mtry(3)

    def test_constant_response(self):
        X = np.random.default_rng(0).normal(size=(40, 3))
        fit = fit_forest(X, np.full(40, 2.5), ForestConfig(n_trees=20))
        np.testing.assert_allclose(predict(fit, X), 2.5)
        assert fit.oob_mse == pytest.approx(0.0)

    def test_reproducible_and_thread_invariant(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(200, 4))
        y = np.sin(6 * X[:, 0]) + X[:, 1] + rng.normal(scale=0.1, size=200)
        a = fit_forest(X, y, ForestConfig(n_trees=30, seed=5))
        b = fit_forest(X, y, ForestConfig(n_trees=30, seed=5, n_threads=2))
        c = fit_forest(X, y, ForestConfig(n_trees=30, seed=6))
        np.testing.assert_array_equal(predict(a, X), predict(b, X))
        np.testing.assert_array_equal(a.oob_pred, b.oob_pred)
        assert not np.array_equal(predict(a, X), predict(c, X))

    def test_leaf_size_and_oob_bookkeeping(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(size=(150, 2))
        y = X[:, 0] + rng.normal(scale=0.1, size=150)
        fit = fit_forest(X, y, ForestConfig(n_trees=40, min_leaf=10))
        assert all(t.n_leaves <= 150 // 10 for t in fit.trees)
        assert fit.oob_count.max() <= 40
        seen = fit.oob_count > 0
        assert fit.oob_mse == pytest.approx(np.mean((fit.oob_pred[seen] - y[seen]) ** 2))

    def test_learns_nonlinear_signal(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, size=(1000, 3))
        f = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
        y = f + rng.normal(scale=0.3, size=1000)
        fit = fit_forest(X, y, ForestConfig(n_trees=100))
        Xt = rng.uniform(-1, 1, size=(500, 3))
        ft = np.sin(3 * Xt[:, 0]) + Xt[:, 1] ** 2
        assert np.mean((predict(fit, Xt) - ft) ** 2) < 0.25 * ft.var()

    def test_input_validation(self):
        with pytest.raises(ValueError):
            fit_forest(np.ones((5, 2)), np.ones(4))
        with pytest.raises(ValueError):
            fit_forest(np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(ValueError):
            fit_forest(np.array([[np.nan]]), np.ones(1))
        fit = fit_forest(np.ones((5, 2)), np.ones(5), ForestConfig(n_trees=2, min_leaf=1))
        with pytest.raises(ValueError):
            predict(fit, np.ones((3, 3)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_predictions_inside_response_range(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    y = rng.normal(size=60)
    fit = fit_forest(X, y, ForestConfig(n_trees=10, min_leaf=3, seed=seed))
    p = predict(fit, rng.normal(size=(30, 3)) * 3)
    assert p.min() >= y.min() - 1e-12 and p.max() <= y.max() + 1e-12
