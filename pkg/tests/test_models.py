import json

import numpy as np
import pytest

from countyrisk.errors import ColumnMismatchError, DroppedColumnWarning, InputError, SingularDesignError
from countyrisk.models import (
    TrainConfig,
    fit_gbt,
    fit_lasso,
    fit_linear,
    fit_random_forest,
    model_from_json,
    model_to_json,
    predict,
)

from conftest import make_matrix
from oracles import cart_predict, fit_cart, reference_lasso_cd


def exact_config(**kw):
    base = dict(
        n_rounds=1, learning_rate=1.0, max_depth=1, min_child_weight=0.0,
        reg_lambda=0.0, gamma=0.0, subsample=1.0, colsample=1.0, seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"learning_rate": 0.0},
            {"learning_rate": 1.5},
            {"max_depth": 0},
            {"subsample": 0.0},
            {"colsample": 1.2},
            {"reg_lambda": -1.0},
            {"n_rounds": -1},
        ],
    )
    def test_rejects_bad_ranges(self, kw):
        with pytest.raises(InputError):
            TrainConfig(**kw)


class TestFitGbt:
    def test_constant_outcome(self):
        m = make_matrix(np.arange(12.0).reshape(6, 2), np.full(6, 3.25))
        model = fit_gbt(m, exact_config(n_rounds=5, reg_lambda=1.0))
        assert model.base_score == 3.25
        for tree in model.trees:
            assert (tree.value == 0.0).all()
        assert predict(model, m.values) == pytest.approx(np.full(6, 3.25))

    def test_step_function_single_split(self):
        x = np.array([[0.1], [0.3], [0.7], [0.9]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        m = make_matrix(x, y)
        model = fit_gbt(m, exact_config())
        tree = model.trees[0]
        # hand enumeration of candidate midpoints: 0.2, 0.5, 0.8; gains
        # 1/3, 1, 1/3 (x 0.5 at lambda=0), so the split lands at 0.5
        assert tree.feature[0] == 0
        assert tree.threshold[0] == pytest.approx(0.5)
        left, right = tree.left[0], tree.right[0]
        assert tree.value[left] == pytest.approx(-0.5)  # group mean minus base
        assert tree.value[right] == pytest.approx(0.5)
        assert predict(model, x) == pytest.approx(y)

    def test_step_split_matches_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        x = np.sort(rng.uniform(size=16)).reshape(-1, 1)
        y = (x[:, 0] > 0.55).astype(float) + 0.01 * rng.normal(size=16)
        m = make_matrix(x, y)
        model = fit_gbt(m, exact_config())
        g = np.full(16, y.mean()) - y
        best_gain, best_thr = 0.0, None
        xs = x[:, 0]
        for t in range(15):
            if xs[t] == xs[t + 1]:
                continue
            gl, gr = g[: t + 1].sum(), g[t + 1 :].sum()
            gain = 0.5 * (gl**2 / (t + 1) + gr**2 / (15 - t) - g.sum() ** 2 / 16)
            if gain > best_gain:
                best_gain, best_thr = gain, 0.5 * (xs[t] + xs[t + 1])
        assert model.trees[0].threshold[0] == pytest.approx(best_thr)

    def test_seed_determinism_bit_identical(self, rng):
        X = rng.normal(size=(80, 5))
        y = X[:, 0] ** 2 + rng.normal(size=80)
        m = make_matrix(X, y)
        cfg = dict(n_rounds=20, learning_rate=0.1, max_depth=3, subsample=0.7, colsample=0.6, seed=99)
        a = model_to_json(fit_gbt(m, TrainConfig(**cfg)))
        b = model_to_json(fit_gbt(m, TrainConfig(**cfg)))
        assert a == b

    def test_different_seed_differs(self, rng):
        X = rng.normal(size=(80, 5))
        y = X[:, 0] + rng.normal(size=80)
        m = make_matrix(X, y)
        a = model_to_json(fit_gbt(m, TrainConfig(n_rounds=10, subsample=0.7, seed=1)))
        b = model_to_json(fit_gbt(m, TrainConfig(n_rounds=10, subsample=0.7, seed=2)))
        assert a != b

    def test_rejects_missing_cells(self, rng):
        m = make_matrix(rng.normal(size=(10, 2)), rng.normal(size=10))
        m.missing_mask[0, 0] = True
        with pytest.raises(InputError):
            fit_gbt(m, exact_config())

    def test_permutation_equivariance(self, rng):
        X = rng.normal(size=(60, 4))
        y = np.sin(X[:, 0]) + rng.normal(size=60) * 0.1
        m = make_matrix(X, y)
        cfg = TrainConfig(n_rounds=15, learning_rate=0.2, max_depth=3, subsample=1.0, colsample=1.0, seed=0)
        base = model_to_json(fit_gbt(m, cfg))
        for trial in range(3):
            perm = rng.permutation(60)
            mp = make_matrix(X[perm], y[perm])
            assert model_to_json(fit_gbt(mp, cfg)) == base

    def test_monotone_training_rmse(self, rng):
        X = rng.normal(size=(50, 3))
        y = X[:, 0] - 2 * X[:, 1] + rng.normal(size=50)
        m = make_matrix(X, y)
        rmses = []
        for rounds in range(0, 12, 2):
            cfg = TrainConfig(n_rounds=rounds, learning_rate=0.3, max_depth=2, subsample=1.0, colsample=1.0, seed=0)
            model = fit_gbt(m, cfg)
            rmses.append(float(np.sqrt(((predict(model, X) - y) ** 2).mean())))
        assert all(b <= a + 1e-12 for a, b in zip(rmses, rmses[1:]))

    def test_gain_positive_and_cover_sums(self, rng):
        X = rng.normal(size=(100, 4))
        y = X[:, 0] * X[:, 1] + rng.normal(size=100)
        model = fit_gbt(make_matrix(X, y), TrainConfig(n_rounds=10, max_depth=4, subsample=1.0, colsample=1.0, seed=0))
        for tree in model.trees:
            internal = np.flatnonzero(tree.feature >= 0)
            assert (tree.gain[internal] > 0).all()
            for node in internal:
                assert tree.cover[node] == tree.cover[tree.left[node]] + tree.cover[tree.right[node]]

    def test_stored_gains_match_formula(self, rng):
        # every node's gradient sum is recoverable from its stored leaf
        # value and cover: value = -lr*G/(H+lam)  =>  G = -value*(H+lam)/lr
        X = rng.normal(size=(80, 3))
        y = np.abs(X[:, 0]) + 0.5 * X[:, 1] + rng.normal(size=80) * 0.2
        lr, lam, gamma = 0.3, 2.0, 0.01
        model = fit_gbt(
            make_matrix(X, y),
            TrainConfig(n_rounds=6, learning_rate=lr, max_depth=3, reg_lambda=lam,
                        gamma=gamma, subsample=1.0, colsample=1.0, seed=0),
        )
        def grad_sum(tree, node):
            return -tree.value[node] * (tree.cover[node] + lam) / lr

        for tree in model.trees:
            for node in np.flatnonzero(tree.feature >= 0):
                l, r = tree.left[node], tree.right[node]
                gl, gr = grad_sum(tree, l), grad_sum(tree, r)
                hl, hr = tree.cover[l], tree.cover[r]
                expected = 0.5 * (
                    gl**2 / (hl + lam) + gr**2 / (hr + lam)
                    - (gl + gr) ** 2 / (hl + hr + lam)
                ) - gamma
                assert tree.gain[node] == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_min_child_weight_blocks_small_leaves(self, rng):
        X = rng.normal(size=(20, 2))
        y = rng.normal(size=20)
        model = fit_gbt(
            make_matrix(X, y),
            TrainConfig(n_rounds=5, max_depth=4, min_child_weight=8.0,
                        subsample=1.0, colsample=1.0, reg_lambda=0.0, seed=0),
        )
        for tree in model.trees:
            leaves = tree.feature < 0
            assert (tree.cover[leaves] >= 8.0).all()

    def test_gamma_prunes_weak_splits(self, rng):
        X = rng.normal(size=(40, 2))
        y = 0.01 * X[:, 0] + rng.normal(size=40) * 0.001
        base = exact_config(n_rounds=1, max_depth=3)
        with_gamma = TrainConfig(
            n_rounds=1, learning_rate=1.0, max_depth=3, min_child_weight=0.0,
            reg_lambda=0.0, gamma=1e6, subsample=1.0, colsample=1.0, seed=0,
        )
        grown = fit_gbt(make_matrix(X, y), base)
        pruned = fit_gbt(make_matrix(X, y), with_gamma)
        assert grown.trees[0].n_nodes > 1
        assert pruned.trees[0].n_nodes == 1  # every gain below the penalty

    def test_subsample_reduces_tree_cover(self, rng):
        X = rng.normal(size=(100, 3))
        y = X[:, 0] + rng.normal(size=100)
        model = fit_gbt(
            make_matrix(X, y),
            TrainConfig(n_rounds=3, max_depth=2, subsample=0.5, colsample=1.0, seed=1),
        )
        for tree in model.trees:
            assert tree.cover[0] == 50.0

    def test_colsample_restricts_features(self, rng):
        X = rng.normal(size=(60, 10))
        y = X.sum(axis=1) + rng.normal(size=60)
        model = fit_gbt(
            make_matrix(X, y),
            TrainConfig(n_rounds=10, max_depth=2, subsample=1.0, colsample=0.3, seed=2),
        )
        for tree in model.trees:
            used = {int(f) for f in tree.feature if f >= 0}
            assert len(used) <= 3  # ceil(0.3 * 10)

    def test_additivity_exact(self, rng):
        X = rng.normal(size=(40, 3))
        y = rng.normal(size=40)
        model = fit_gbt(make_matrix(X, y), TrainConfig(n_rounds=8, max_depth=3, subsample=1.0, colsample=1.0, seed=0))
        manual = np.full(40, model.base_score)
        for tree in model.trees:
            manual += tree.leaf_values(X)
        assert np.array_equal(manual, predict(model, X))


class TestPredict:
    def test_empty_ensemble_returns_base(self, rng):
        m = make_matrix(rng.normal(size=(7, 2)), np.arange(7.0))
        model = fit_gbt(m, TrainConfig(n_rounds=0, seed=0))
        assert predict(model, m.values) == pytest.approx(np.full(7, 3.0))

    def test_tie_goes_right_at_threshold(self):
        # contract: value < threshold -> left, value >= threshold -> right
        x = np.array([[0.0], [1.0]])
        y = np.array([0.0, 1.0])
        model = fit_gbt(make_matrix(x, y), exact_config())
        thr = model.trees[0].threshold[0]
        at_threshold = predict(model, np.array([[thr]]))
        assert at_threshold == pytest.approx(predict(model, np.array([[thr + 1e-9]])))

    def test_column_mismatch(self, rng):
        m = make_matrix(rng.normal(size=(10, 3)), rng.normal(size=10))
        model = fit_gbt(m, exact_config())
        with pytest.raises(ColumnMismatchError):
            predict(model, rng.normal(size=(4, 2)))

    def test_serialization_round_trip_bit_exact(self, rng):
        X = rng.normal(size=(50, 4))
        y = np.cos(X[:, 1]) + rng.normal(size=50) * 0.2
        model = fit_gbt(make_matrix(X, y), TrainConfig(n_rounds=12, max_depth=3, seed=4))
        text = model_to_json(model)
        clone = model_from_json(text)
        assert np.array_equal(predict(model, X), predict(clone, X))
        assert model_to_json(clone) == text


class TestRandomForest:
    def test_constant_outcome(self, rng):
        m = make_matrix(rng.normal(size=(30, 3)), np.full(30, 2.5))
        model = fit_random_forest(m, n_trees=5, max_depth=4, mtry=3, seed=0)
        assert predict(model, m.values) == pytest.approx(np.full(30, 2.5))

    def test_single_tree_full_features_equals_cart(self, rng):
        X = rng.normal(size=(60, 3))
        y = X[:, 0] + 0.5 * (X[:, 1] > 0) + rng.normal(size=60) * 0.1
        m = make_matrix(X, y)
        model = fit_random_forest(m, n_trees=1, max_depth=3, mtry=3, seed=0, bootstrap=False)
        cart = fit_cart(X, y, max_depth=3)
        got = predict(model, X)
        want = np.array([cart_predict(cart, row) for row in X])
        assert got == pytest.approx(want, rel=1e-12)

    def test_seed_determinism(self, rng):
        X = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        m = make_matrix(X, y)
        a = fit_random_forest(m, n_trees=10, max_depth=4, mtry=2, seed=5)
        b = fit_random_forest(m, n_trees=10, max_depth=4, mtry=2, seed=5)
        assert model_to_json(a) == model_to_json(b)

    def test_mtry_bounds(self, rng):
        m = make_matrix(rng.normal(size=(20, 3)), rng.normal(size=20))
        with pytest.raises(InputError):
            fit_random_forest(m, n_trees=2, max_depth=2, mtry=9, seed=0)

    def test_serialization_round_trip(self, rng):
        X = rng.normal(size=(40, 3))
        m = make_matrix(X, rng.normal(size=40))
        model = fit_random_forest(m, n_trees=5, max_depth=3, mtry=2, seed=1)
        clone = model_from_json(model_to_json(model))
        assert np.array_equal(predict(model, X), predict(clone, X))
        assert model_to_json(clone) == model_to_json(model)


class TestFitLinear:
    def test_exact_recovery(self):
        x = np.linspace(0, 1, 20).reshape(-1, 1)
        y = 2 * x[:, 0] + 1
        model = fit_linear(make_matrix(x, y))
        assert model.intercept == pytest.approx(1.0, abs=1e-10)
        assert model.coefficients[0] == pytest.approx(2.0, abs=1e-10)

    def test_orthogonal_outcome(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        y = np.array([3.0, 3.0, 3.0, 3.0])
        model = fit_linear(make_matrix(X, y))
        assert model.coefficients == pytest.approx([0.0, 0.0], abs=1e-12)
        assert model.intercept == pytest.approx(3.0)

    def test_matches_normal_equations(self, rng):
        X = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        model = fit_linear(make_matrix(X, y))
        design = np.hstack([np.ones((20, 1)), X])
        beta = np.linalg.solve(design.T @ design, design.T @ y)
        assert model.intercept == pytest.approx(beta[0], abs=1e-8)
        assert model.coefficients == pytest.approx(beta[1:], abs=1e-8)

    def test_singular_design_names_columns(self, rng):
        x0 = rng.normal(size=15)
        X = np.column_stack([x0, 2 * x0, rng.normal(size=15)])
        with pytest.raises(SingularDesignError) as err:
            fit_linear(make_matrix(X, rng.normal(size=15)))
        assert err.value.collinear


class TestFitLasso:
    def test_full_shrinkage(self, rng):
        X = rng.normal(size=(30, 4))
        y = X[:, 0] + rng.normal(size=30)
        model = fit_lasso(make_matrix(X, y), lambda_grid=[1e9])
        assert (model.coefficients == 0).all()
        assert model.intercept == pytest.approx(y.mean())

    def test_lambda_zero_matches_ols(self, rng):
        X = rng.normal(size=(40, 3))
        y = X @ np.array([1.0, -2.0, 0.5]) + rng.normal(size=40)
        m = make_matrix(X, y)
        lasso = fit_lasso(m, lambda_grid=[0.0])
        ols = fit_linear(m)
        assert lasso.coefficients == pytest.approx(ols.coefficients, abs=1e-6)
        assert lasso.intercept == pytest.approx(ols.intercept, abs=1e-6)

    def test_matches_reference_coordinate_descent(self, rng):
        X = rng.normal(size=(50, 2))
        y = 1.5 * X[:, 0] - 0.5 * X[:, 1] + rng.normal(size=50) * 0.3
        m = make_matrix(X, y)
        lam = 0.2
        model = fit_lasso(m, lambda_grid=[lam])
        mu, sd = X.mean(axis=0), X.std(axis=0)
        Xs = (X - mu) / sd
        beta_ref = reference_lasso_cd(Xs, y - y.mean(), lam)
        assert model.coefficients * sd == pytest.approx(beta_ref, abs=1e-6)

    def test_kkt_conditions_at_convergence(self, rng):
        X = rng.normal(size=(60, 6))
        y = X[:, 0] - X[:, 3] + rng.normal(size=60)
        m = make_matrix(X, y)
        model = fit_lasso(m, inner_folds=3, seed=9)
        lam = model.selected_lambda
        mu, sd = X.mean(axis=0), X.std(axis=0)
        Xs = (X - mu) / sd
        beta_std = model.coefficients * sd
        resid = (y - y.mean()) - Xs @ beta_std
        grad = Xs.T @ resid / X.shape[0]
        for j in range(6):
            if beta_std[j] == 0.0:
                assert abs(grad[j]) <= lam + 1e-5

    def test_zero_variance_column_dropped(self, rng):
        X = rng.normal(size=(30, 3))
        X[:, 1] = 7.0
        y = X[:, 0] + rng.normal(size=30)
        with pytest.warns(DroppedColumnWarning):
            model = fit_lasso(make_matrix(X, y), lambda_grid=[0.01])
        assert model.coefficients[1] == 0.0

    def test_cv_lambda_selection_runs(self, rng):
        X = rng.normal(size=(60, 5))
        y = 2 * X[:, 0] + rng.normal(size=60) * 0.2
        model = fit_lasso(make_matrix(X, y), inner_folds=4, seed=3)
        assert model.selected_lambda > 0
        assert abs(model.coefficients[0]) > 1.0

    def test_linear_serialization_round_trip(self, rng):
        X = rng.normal(size=(30, 4))
        y = X[:, 0] - X[:, 2] + rng.normal(size=30)
        model = fit_lasso(make_matrix(X, y), inner_folds=3, seed=0)
        clone = model_from_json(model_to_json(model))
        assert np.array_equal(model.predict(X), clone.predict(X))
        assert model_to_json(clone) == model_to_json(model)
