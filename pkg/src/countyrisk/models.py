"""Regression models: gradient-boosted trees plus the three baselines.

The boosted ensemble uses exact greedy split search on squared-error
gradients (g_i = yhat_i - y_i, constant second-order weight), one tree
per round, with the split gain

    0.5 * [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - (G_L+G_R)^2/(H_L+H_R+lam)] - gamma

and leaf values -lr * G/(H+lam). Thresholds sit at midpoints of
consecutive distinct feature values; ties break toward the lower feature
index, then the lower threshold. All in-node reductions run in a
canonical (feature value, gradient) sort order so fits are bit-identical
under any permutation of the training rows when subsampling is off.

The random forest reuses the same tree kernel with g = -y (the gain then
equals the classic variance-reduction criterion and leaves predict the
node mean). Linear and L1-penalized baselines complete the comparison
set from the study design.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .data import FeatureMatrix
from .errors import (
    ColumnMismatchError,
    DroppedColumnWarning,
    InputError,
    NumericalError,
    SingularDesignError,
)
from .rng import derive_seed, next_u64, stream, unit_seed

FORMAT_VERSION = 1

_U64 = np.uint64


@njit(cache=True, nogil=True)
def _build_tree(
    X,
    g,
    rows,
    feats,
    mtry,
    max_depth,
    min_child_weight,
    reg_lambda,
    gamma,
    lr,
    seed,
):
    """Grow one regression tree; returns flat node arrays.

    Node ids are assigned in creation order with the root at 0, so a
    child's id is always greater than its parent's (the attribution and
    expectation passes rely on this).
    """
    n = rows.shape[0]
    if max_depth < 25:
        cap = 2 ** (max_depth + 1) - 1
        if cap > 2 * n + 1:
            cap = 2 * n + 1
    else:
        cap = 2 * n + 1

    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap, np.float64)
    cover = np.zeros(cap, np.float64)
    gain_arr = np.zeros(cap, np.float64)

    idx = rows.copy()
    tmp = np.empty(n, np.int64)

    stack = np.empty((2 * max_depth + 8, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    state = _U64(seed)
    pool = feats.copy()
    n_feats = feats.shape[0]

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start

        # canonical node sums: gradients added in sorted order
        gnode = np.empty(m, np.float64)
        for i in range(m):
            gnode[i] = g[idx[start + i]]
        gnode.sort()
        G = 0.0
        for i in range(m):
            G += gnode[i]
        H = float(m)
        cover[node] = H
        value[node] = -lr * G / (H + reg_lambda)

        if depth >= max_depth or m < 2:
            continue

        if mtry < n_feats:
            for t in range(mtry):
                state, r = next_u64(state)
                j = t + int(r % _U64(n_feats - t))
                pool[t], pool[j] = pool[j], pool[t]
            cand = np.sort(pool[:mtry])
        else:
            cand = feats

        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        parent_score = G * G / (H + reg_lambda)

        xv = np.empty(m, np.float64)
        gv = np.empty(m, np.float64)
        for ci in range(cand.shape[0]):
            f = cand[ci]
            for i in range(m):
                r0 = idx[start + i]
                xv[i] = X[r0, f]
                gv[i] = g[r0]
            # lexicographic (x, g) order: equal-g ties are interchangeable,
            # equal-x groups accumulate in ascending-g order
            o1 = np.argsort(gv)
            xs = xv[o1]
            o2 = np.argsort(xs, kind="mergesort")
            GL = 0.0
            HL = 0.0
            for t in range(m - 1):
                GL += gv[o1[o2[t]]]
                HL += 1.0
                if xs[o2[t]] == xs[o2[t + 1]]:
                    continue
                HR = H - HL
                GR = G - GL
                if HL < min_child_weight or HR < min_child_weight:
                    continue
                gain = (
                    0.5
                    * (
                        GL * GL / (HL + reg_lambda)
                        + GR * GR / (HR + reg_lambda)
                        - parent_score
                    )
                    - gamma
                )
                if gain > best_gain:
                    best_gain = gain
                    best_feat = f
                    best_thr = 0.5 * (xs[o2[t]] + xs[o2[t + 1]])

        if best_feat < 0 or n_nodes + 2 > cap:
            continue

        n_left = 0
        for t in range(m):
            r0 = idx[start + t]
            if X[r0, best_feat] < best_thr:
                tmp[n_left] = r0
                n_left += 1
        pos = n_left
        for t in range(m):
            r0 = idx[start + t]
            if not (X[r0, best_feat] < best_thr):
                tmp[pos] = r0
                pos += 1
        for t in range(m):
            idx[start + t] = tmp[t]

        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = left_id
        right[node] = right_id
        gain_arr[node] = best_gain

        mid = start + n_left
        stack[top, 0] = right_id
        stack[top, 1] = mid
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = left_id
        stack[top, 1] = start
        stack[top, 2] = mid
        stack[top, 3] = depth + 1
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        cover[:n_nodes].copy(),
        gain_arr[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def _add_leaf_values(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += value[node]


@dataclass(eq=False)
class TrainConfig:
    """Boosting hyperparameters; all ranges validated at construction."""

    n_rounds: int = 500
    learning_rate: float = 0.05
    max_depth: int = 4
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    subsample: float = 0.8
    colsample: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 0:
            raise InputError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise InputError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise InputError("max_depth must be >= 1")
        if self.min_child_weight < 0:
            raise InputError("min_child_weight must be >= 0")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise InputError("reg_lambda and gamma must be >= 0")
        if not 0.0 < self.subsample <= 1.0:
            raise InputError("subsample must be in (0, 1]")
        if not 0.0 < self.colsample <= 1.0:
            raise InputError("colsample must be in (0, 1]")


class RegressionTree:
    """Flat-array binary regression tree (root at index 0)."""

    __slots__ = ("feature", "threshold", "left", "right", "value", "cover", "gain", "missing_left")

    def __init__(self, feature, threshold, left, right, value, cover, gain, missing_left=None):
        self.feature = np.asarray(feature, np.int32)
        self.threshold = np.asarray(threshold, np.float64)
        self.left = np.asarray(left, np.int32)
        self.right = np.asarray(right, np.int32)
        self.value = np.asarray(value, np.float64)
        self.cover = np.asarray(cover, np.float64)
        self.gain = np.asarray(gain, np.float64)
        if missing_left is None:
            # missing values never reach the trainer; slot kept for format completeness
            missing_left = np.ones(self.feature.shape[0], np.bool_)
        self.missing_left = np.asarray(missing_left, np.bool_)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        _add_leaf_values(
            X, self.feature, self.threshold, self.left, self.right, self.value, out
        )
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "gain": self.gain.tolist(),
            "missing_left": [int(b) for b in self.missing_left],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            d["feature"],
            d["threshold"],
            d["left"],
            d["right"],
            d["value"],
            d["cover"],
            d["gain"],
            np.array(d["missing_left"], dtype=bool),
        )


def _as_array(rows, feature_names) -> np.ndarray:
    if isinstance(rows, FeatureMatrix):
        if rows.column_names != list(feature_names):
            raise ColumnMismatchError(
                "feature columns do not match the model "
                f"(expected {list(feature_names)}, got {rows.column_names})"
            )
        return np.ascontiguousarray(rows.values)
    X = np.ascontiguousarray(np.asarray(rows, dtype=np.float64))
    if X.ndim != 2 or X.shape[1] != len(feature_names):
        raise ColumnMismatchError(
            f"expected {len(feature_names)} feature columns, got shape {X.shape}"
        )
    return X


@dataclass(eq=False)
class GBTModel:
    base_score: float
    trees: list[RegressionTree]
    config: TrainConfig
    feature_names: list[str]

    def predict(self, rows) -> np.ndarray:
        X = _as_array(rows, self.feature_names)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            _add_leaf_values(
                X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, out
            )
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": "gbt",
            "base_score": self.base_score,
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBTModel":
        return cls(
            base_score=d["base_score"],
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            config=TrainConfig(**d["config"]),
            feature_names=list(d["feature_names"]),
        )


@dataclass(eq=False)
class ForestModel:
    trees: list[RegressionTree]
    feature_names: list[str]
    n_trees: int
    max_depth: int
    mtry: int
    seed: int
    bootstrap: bool = True

    def predict(self, rows) -> np.ndarray:
        X = _as_array(rows, self.feature_names)
        out = np.zeros(X.shape[0])
        for tree in self.trees:
            _add_leaf_values(
                X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, out
            )
        return out / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": "forest",
            "feature_names": list(self.feature_names),
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "mtry": self.mtry,
            "seed": self.seed,
            "bootstrap": self.bootstrap,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            feature_names=list(d["feature_names"]),
            n_trees=d["n_trees"],
            max_depth=d["max_depth"],
            mtry=d["mtry"],
            seed=d["seed"],
            bootstrap=d["bootstrap"],
        )


@dataclass(eq=False)
class LinearModel:
    intercept: float
    coefficients: np.ndarray
    feature_names: list[str]
    column_means: np.ndarray
    column_sds: np.ndarray
    kind: str = "ols"  # "ols" | "lasso"
    selected_lambda: float | None = None

    def predict(self, rows) -> np.ndarray:
        X = _as_array(rows, self.feature_names)
        return self.intercept + X @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": "linear",
            "kind": self.kind,
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "feature_names": list(self.feature_names),
            "column_means": self.column_means.tolist(),
            "column_sds": self.column_sds.tolist(),
            "selected_lambda": self.selected_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(
            intercept=d["intercept"],
            coefficients=np.array(d["coefficients"], dtype=float),
            feature_names=list(d["feature_names"]),
            column_means=np.array(d["column_means"], dtype=float),
            column_sds=np.array(d["column_sds"], dtype=float),
            kind=d["kind"],
            selected_lambda=d["selected_lambda"],
        )


def _check_training_matrix(matrix: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    if matrix.n < 2:
        raise InputError("training requires at least 2 rows")
    if matrix.missing_mask.any():
        raise InputError("matrix still has missing cells; impute first")
    if not np.isfinite(matrix.outcome).all():
        raise InputError("outcome contains non-finite values")
    return np.ascontiguousarray(matrix.values), matrix.outcome.astype(float)


def _canonical_mean(y: np.ndarray) -> float:
    # summing in sorted order keeps the result independent of row order
    return float(np.sort(y).sum() / y.size)


def fit_gbt(matrix: FeatureMatrix, config: TrainConfig | None = None) -> GBTModel:
    """Boosted ensemble on squared-error gradients; see module docstring."""
    if config is None:
        config = TrainConfig()
    X, y = _check_training_matrix(matrix)
    n, p = X.shape
    base = _canonical_mean(y)
    pred = np.full(n, base)
    all_feats = np.arange(p, dtype=np.int64)
    all_rows = np.arange(n, dtype=np.int64)
    row_rng = stream(config.seed, "gbt.rows")
    col_rng = stream(config.seed, "gbt.cols")
    n_sub = max(1, int(n * config.subsample + 0.5))
    n_col = max(1, int(math.ceil(p * config.colsample)))

    trees = []
    for _ in range(config.n_rounds):
        g = pred - y
        rows = (
            all_rows
            if config.subsample >= 1.0
            else np.sort(row_rng.choice(n, size=n_sub, replace=False))
        )
        feats = (
            all_feats
            if config.colsample >= 1.0
            else np.sort(col_rng.choice(p, size=n_col, replace=False))
        )
        arrays = _build_tree(
            X,
            g,
            rows,
            feats,
            len(feats),
            config.max_depth,
            float(config.min_child_weight),
            float(config.reg_lambda),
            float(config.gamma),
            float(config.learning_rate),
            0,
        )
        tree = RegressionTree(*arrays)
        _add_leaf_values(
            X, tree.feature, tree.threshold, tree.left, tree.right, tree.value, pred
        )
        trees.append(tree)
    return GBTModel(
        base_score=base,
        trees=trees,
        config=config,
        feature_names=list(matrix.column_names),
    )


def predict(model, rows) -> np.ndarray:
    """Predict with any fitted model (column schema checked)."""
    return model.predict(rows)


def fit_random_forest(
    matrix: FeatureMatrix,
    n_trees: int,
    max_depth: int,
    mtry: int,
    seed: int,
    bootstrap: bool = True,
    min_leaf: float = 1.0,
) -> ForestModel:
    """Bagged variance-reduction trees with per-node feature sampling."""
    X, y = _check_training_matrix(matrix)
    n, p = X.shape
    if not 1 <= mtry <= p:
        raise InputError(f"mtry must be in [1, {p}]")
    g = -y
    all_feats = np.arange(p, dtype=np.int64)
    all_rows = np.arange(n, dtype=np.int64)
    boot_rng = stream(seed, "forest.bootstrap")
    node_seed_base = derive_seed(seed, "forest.nodes")

    trees = []
    for t in range(n_trees):
        rows = (
            np.sort(boot_rng.integers(0, n, size=n)) if bootstrap else all_rows
        )
        arrays = _build_tree(
            X,
            g,
            rows,
            all_feats,
            mtry,
            max_depth,
            float(min_leaf),
            0.0,
            0.0,
            1.0,
            unit_seed(node_seed_base, t),
        )
        trees.append(RegressionTree(*arrays))
    return ForestModel(
        trees=trees,
        feature_names=list(matrix.column_names),
        n_trees=n_trees,
        max_depth=max_depth,
        mtry=mtry,
        seed=seed,
        bootstrap=bootstrap,
    )


def fit_linear(matrix: FeatureMatrix) -> LinearModel:
    """Ordinary least squares with intercept."""
    X, y = _check_training_matrix(matrix)
    n, p = X.shape
    design = np.hstack([np.ones((n, 1)), X])
    beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < p + 1:
        from scipy.linalg import qr

        _, _, pivots = qr(design, mode="economic", pivoting=True)
        extra = [pivots[i] for i in range(rank, p + 1) if pivots[i] > 0]
        names = [matrix.column_names[i - 1] for i in extra]
        raise SingularDesignError(
            f"design matrix is rank deficient; collinear columns: {names}", names
        )
    return LinearModel(
        intercept=float(beta[0]),
        coefficients=beta[1:].copy(),
        feature_names=list(matrix.column_names),
        column_means=X.mean(axis=0),
        column_sds=X.std(axis=0),
        kind="ols",
    )


def _soft_threshold(rho: float, lam: float) -> float:
    if rho > lam:
        return rho - lam
    if rho < -lam:
        return rho + lam
    return 0.0


def _coordinate_descent(Xs, yc, lam, beta, tol=1e-7, max_sweeps=100_000):
    """Cyclic coordinate descent for (1/2n)||y - Xb||^2 + lam * ||b||_1."""
    n, p = Xs.shape
    z = (Xs * Xs).mean(axis=0)
    resid = yc - Xs @ beta
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            old = beta[j]
            rho = Xs[:, j] @ resid / n + z[j] * old
            new = _soft_threshold(rho, lam) / z[j]
            if new != old:
                resid -= Xs[:, j] * (new - old)
                beta[j] = new
                delta = abs(new - old)
                if delta > max_delta:
                    max_delta = delta
        if max_delta < tol:
            break
    return beta


def _round_robin_folds(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    assignment = np.empty(n, dtype=np.int64)
    perm = rng.permutation(n)
    for i in range(n):
        assignment[perm[i]] = i % k
    return assignment


def fit_lasso(
    matrix: FeatureMatrix,
    lambda_grid=None,
    inner_folds: int = 5,
    seed: int = 0,
) -> LinearModel:
    """L1-penalized least squares via coordinate descent.

    Columns are standardized internally; the penalty level is chosen by
    inner cross-validated RMSE over a 50-point log grid from lambda_max
    (smallest value zeroing every coefficient) down to lambda_max*1e-4,
    unless an explicit grid is given. Coefficients are reported on the
    original scale. Zero-variance columns are dropped with a warning.
    """
    X, y = _check_training_matrix(matrix)
    n, p = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    if not keep.all():
        dropped = [matrix.column_names[j] for j in np.flatnonzero(~keep)]
        warnings.warn(f"dropping zero-variance columns: {dropped}", DroppedColumnWarning)
    Xs = (X[:, keep] - mu[keep]) / sd[keep]
    y_mean = float(y.mean())
    yc = y - y_mean
    p_kept = Xs.shape[1]

    if p_kept == 0:
        coef = np.zeros(p)
        return LinearModel(
            intercept=y_mean,
            coefficients=coef,
            feature_names=list(matrix.column_names),
            column_means=mu,
            column_sds=sd,
            kind="lasso",
            selected_lambda=0.0,
        )

    if lambda_grid is None:
        lam_max = float(np.abs(Xs.T @ yc).max() / n)
        if lam_max == 0.0:
            lambda_grid = [0.0]
        else:
            lambda_grid = np.geomspace(lam_max, lam_max * 1e-4, 50)
    lambda_grid = sorted((float(l) for l in lambda_grid), reverse=True)

    if len(lambda_grid) > 1:
        rng = stream(seed, "lasso.inner_cv")
        folds = _round_robin_folds(n, min(inner_folds, n), rng)
        rmse = np.zeros(len(lambda_grid))
        for f in range(folds.max() + 1):
            val = folds == f
            beta = np.zeros(p_kept)
            for li, lam in enumerate(lambda_grid):
                beta = _coordinate_descent(Xs[~val], yc[~val], lam, beta)
                err = yc[val] - Xs[val] @ beta
                rmse[li] += math.sqrt(float(err @ err) / val.sum())
        best_lambda = lambda_grid[int(np.argmin(rmse))]
    else:
        best_lambda = lambda_grid[0]

    beta = np.zeros(p_kept)
    for lam in [l for l in lambda_grid if l >= best_lambda]:
        beta = _coordinate_descent(Xs, yc, lam, beta)

    coef = np.zeros(p)
    coef[keep] = beta / sd[keep]
    return LinearModel(
        intercept=y_mean - float(coef @ mu),
        coefficients=coef,
        feature_names=list(matrix.column_names),
        column_means=mu,
        column_sds=sd,
        kind="lasso",
        selected_lambda=best_lambda,
    )


_MODEL_CLASSES = {"gbt": GBTModel, "forest": ForestModel, "linear": LinearModel}


def model_to_json(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True)


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("format_version") != FORMAT_VERSION:
        raise NumericalError(f"unsupported model format version {d.get('format_version')}")
    kind = d.get("model")
    if kind not in _MODEL_CLASSES:
        raise NumericalError(f"unknown model kind {kind!r}")
    return _MODEL_CLASSES[kind].from_dict(d)


def save_model(model, path, meta: dict | None = None) -> None:
    d = model.to_dict()
    if meta:
        d["_meta"] = meta
    Path(path).write_text(json.dumps(d, sort_keys=True, indent=1))


def load_model(path):
    return model_from_json(Path(path).read_text())
