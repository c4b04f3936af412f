"""Exact per-feature Shapley attribution for tree ensembles.

Implements the polynomial-time path-weight recursion over each tree,
using node cover (the training-sample mass that reached each node) as
the background weighting, so attributions are exact Shapley values of
the cover-weighted conditional expectation game. Attributions are
additive: base_value + sum(phi[i]) equals the model prediction for
every row.

Also provides the global importance ranking (mean absolute attribution)
and the flat table exports consumed by external plotting tools.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .data import FeatureMatrix
from .errors import ColumnMismatchError, MalformedModelError
from .models import GBTModel


@njit(cache=True, nogil=True)
def _unwound_sum(pz, po, pw, level, top, s):
    one = po[level, s]
    zero = pz[level, s]
    next_one = pw[level, top]
    total = 0.0
    for i in range(top - 1, -1, -1):
        if one != 0.0:
            tmp = next_one * (top + 1.0) / ((i + 1.0) * one)
            total += tmp
            next_one = pw[level, i] - tmp * zero * (top - i) / (top + 1.0)
        else:
            total += pw[level, i] * (top + 1.0) / (zero * (top - i))
    return total


@njit(cache=True, nogil=True)
def _unwind(pfeat, pz, po, pw, level, top, s):
    one = po[level, s]
    zero = pz[level, s]
    next_one = pw[level, top]
    for i in range(top - 1, -1, -1):
        if one != 0.0:
            tmp = pw[level, i]
            pw[level, i] = next_one * (top + 1.0) / ((i + 1.0) * one)
            next_one = tmp - pw[level, i] * zero * (top - i) / (top + 1.0)
        else:
            pw[level, i] = pw[level, i] * (top + 1.0) / (zero * (top - i))
    for i in range(s, top):
        pfeat[level, i] = pfeat[level, i + 1]
        pz[level, i] = pz[level, i + 1]
        po[level, i] = po[level, i + 1]


@njit(cache=True, nogil=True)
def _tree_shap_row(
    x, feature, threshold, left, right, value, cover,
    pfeat, pz, po, pw, nstack, fstack, phi,
):
    # stack entries: node, existing path length, parent level, split feature
    nstack[0, 0] = 0
    nstack[0, 1] = 0
    nstack[0, 2] = -1
    nstack[0, 3] = -1
    fstack[0, 0] = 1.0
    fstack[0, 1] = 1.0
    sp = 1
    while sp > 0:
        sp -= 1
        node = nstack[sp, 0]
        u = nstack[sp, 1]
        parent = nstack[sp, 2]
        pi = nstack[sp, 3]
        pz_in = fstack[sp, 0]
        po_in = fstack[sp, 1]
        level = parent + 1

        for s in range(u):
            pfeat[level, s] = pfeat[parent, s]
            pz[level, s] = pz[parent, s]
            po[level, s] = po[parent, s]
            pw[level, s] = pw[parent, s]
        # extend the path with this branch's fractions
        pfeat[level, u] = pi
        pz[level, u] = pz_in
        po[level, u] = po_in
        pw[level, u] = 1.0 if u == 0 else 0.0
        for i in range(u - 1, -1, -1):
            pw[level, i + 1] += po_in * pw[level, i] * (i + 1.0) / (u + 1.0)
            pw[level, i] = pz_in * pw[level, i] * (u - i) / (u + 1.0)
        top = u

        if feature[node] < 0:
            for s in range(1, top + 1):
                w = _unwound_sum(pz, po, pw, level, top, s)
                phi[pfeat[level, s]] += w * (po[level, s] - pz[level, s]) * value[node]
            continue

        f = feature[node]
        if x[f] < threshold[node]:
            hot, cold = left[node], right[node]
        else:
            hot, cold = right[node], left[node]
        iz = 1.0
        io = 1.0
        u_child = top + 1
        for s in range(1, top + 1):
            if pfeat[level, s] == f:
                iz = pz[level, s]
                io = po[level, s]
                _unwind(pfeat, pz, po, pw, level, top, s)
                u_child = top
                break

        nstack[sp, 0] = cold
        nstack[sp, 1] = u_child
        nstack[sp, 2] = level
        nstack[sp, 3] = f
        fstack[sp, 0] = iz * cover[cold] / cover[node]
        fstack[sp, 1] = 0.0
        sp += 1
        nstack[sp, 0] = hot
        nstack[sp, 1] = u_child
        nstack[sp, 2] = level
        nstack[sp, 3] = f
        fstack[sp, 0] = iz * cover[hot] / cover[node]
        fstack[sp, 1] = io
        sp += 1


@njit(cache=True, nogil=True)
def _shap_block(
    X, tree_ptr, feats, thrs, lefts, rights, values, covers, max_depth, phi_out, lo, hi,
):
    size = max_depth + 2
    pfeat = np.empty((size, size), np.int64)
    pz = np.empty((size, size), np.float64)
    po = np.empty((size, size), np.float64)
    pw = np.empty((size, size), np.float64)
    nstack = np.empty((2 * size + 2, 4), np.int64)
    fstack = np.empty((2 * size + 2, 2), np.float64)
    n_trees = tree_ptr.shape[0] - 1
    for i in range(lo, hi):
        x = X[i]
        phi = phi_out[i]
        for t in range(n_trees):
            a, b = tree_ptr[t], tree_ptr[t + 1]
            _tree_shap_row(
                x,
                feats[a:b], thrs[a:b], lefts[a:b], rights[a:b], values[a:b], covers[a:b],
                pfeat, pz, po, pw, nstack, fstack, phi,
            )


@njit(cache=True, nogil=True)
def _tree_depth(feature, left, right):
    n = feature.shape[0]
    depth = np.zeros(n, np.int64)
    best = 0
    for node in range(n):
        if feature[node] >= 0:
            depth[left[node]] = depth[node] + 1
            depth[right[node]] = depth[node] + 1
        elif depth[node] > best:
            best = depth[node]
    return best


@njit(cache=True, nogil=True)
def _tree_expectation(feature, left, right, value, cover):
    n = feature.shape[0]
    e = np.empty(n, np.float64)
    for node in range(n - 1, -1, -1):
        if feature[node] < 0:
            e[node] = value[node]
        else:
            e[node] = (
                cover[left[node]] * e[left[node]] + cover[right[node]] * e[right[node]]
            ) / cover[node]
    return e[0]


@dataclass(eq=False)
class ShapResult:
    """Per-row, per-feature attributions plus the shared base value."""

    base_value: float
    phi: np.ndarray  # (n, p)
    feature_names: list[str]
    row_fips: list[str]


@dataclass(frozen=True)
class ImportanceRanking:
    """(feature, mean |attribution|) pairs, sorted non-increasing."""

    entries: list[tuple[str, float]]


def _validate_trees(model: GBTModel) -> None:
    for t, tree in enumerate(model.trees):
        internal = tree.feature >= 0
        if (tree.cover[internal] <= 0).any():
            raise MalformedModelError(f"tree {t}: internal node with non-positive cover")
        for node in np.flatnonzero(internal):
            if tree.left[node] <= node or tree.right[node] <= node:
                raise MalformedModelError(
                    f"tree {t}: children must have larger indices than node {node}"
                )


def _flatten(model: GBTModel):
    sizes = [t.n_nodes for t in model.trees]
    ptr = np.zeros(len(sizes) + 1, np.int64)
    ptr[1:] = np.cumsum(sizes)
    feats = np.concatenate([t.feature for t in model.trees]) if sizes else np.empty(0, np.int32)
    thrs = np.concatenate([t.threshold for t in model.trees]) if sizes else np.empty(0)
    lefts = np.concatenate([t.left for t in model.trees]) if sizes else np.empty(0, np.int32)
    rights = np.concatenate([t.right for t in model.trees]) if sizes else np.empty(0, np.int32)
    values = np.concatenate([t.value for t in model.trees]) if sizes else np.empty(0)
    covers = np.concatenate([t.cover for t in model.trees]) if sizes else np.empty(0)
    return ptr, feats, thrs, lefts, rights, values, covers


def tree_shap(model: GBTModel, rows, n_threads: int = 1) -> ShapResult:
    """Exact Shapley attributions for every row under the fitted ensemble.

    base_value is the cover-weighted expectation of the whole model
    (base score plus each tree's root expectation); phi[i] sums with it
    to the model's prediction of row i.
    """
    if isinstance(rows, FeatureMatrix):
        if rows.column_names != model.feature_names:
            raise ColumnMismatchError("feature columns do not match the model")
        X = np.ascontiguousarray(rows.values)
        fips = list(rows.row_fips)
    else:
        X = np.ascontiguousarray(np.asarray(rows, dtype=float))
        if X.ndim != 2 or X.shape[1] != len(model.feature_names):
            raise ColumnMismatchError(
                f"expected {len(model.feature_names)} columns, got shape {X.shape}"
            )
        fips = [str(i) for i in range(X.shape[0])]

    _validate_trees(model)
    n, p = X.shape
    phi = np.zeros((n, p))
    base = model.base_score
    if model.trees:
        ptr, feats, thrs, lefts, rights, values, covers = _flatten(model)
        max_depth = max(
            int(_tree_depth(t.feature, t.left, t.right)) for t in model.trees
        )
        if n_threads > 1 and n >= 2 * n_threads:
            from concurrent.futures import ThreadPoolExecutor

            bounds = np.linspace(0, n, n_threads + 1).astype(np.int64)
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                futures = [
                    pool.submit(
                        _shap_block,
                        X, ptr, feats, thrs, lefts, rights, values, covers,
                        max_depth, phi, int(bounds[b]), int(bounds[b + 1]),
                    )
                    for b in range(n_threads)
                ]
                for fut in futures:
                    fut.result()
        else:
            _shap_block(
                X, ptr, feats, thrs, lefts, rights, values, covers, max_depth, phi, 0, n
            )
        for tree in model.trees:
            base += float(
                _tree_expectation(tree.feature, tree.left, tree.right, tree.value, tree.cover)
            )
    return ShapResult(
        base_value=base,
        phi=phi,
        feature_names=list(model.feature_names),
        row_fips=fips,
    )


def global_importance(shap: ShapResult) -> ImportanceRanking:
    """Features ranked by mean absolute attribution (stable under ties)."""
    scores = np.abs(shap.phi).mean(axis=0)
    order = np.argsort(-scores, kind="stable")
    return ImportanceRanking(
        entries=[(shap.feature_names[j], float(scores[j])) for j in order]
    )


def dependence_export(shap: ShapResult, matrix: FeatureMatrix, feature: str) -> list[dict]:
    """Per-county (feature value, attribution, fips) rows sorted by value."""
    if feature not in shap.feature_names:
        raise ColumnMismatchError(f"unknown feature {feature!r}")
    j = shap.feature_names.index(feature)
    col = matrix.values[:, matrix.column_names.index(feature)]
    order = np.argsort(col, kind="stable")
    return [
        {
            "feature": feature,
            "value": float(col[i]),
            "phi": float(shap.phi[i, j]),
            "fips": shap.row_fips[i],
        }
        for i in order
    ]


def beeswarm_export(shap: ShapResult, matrix: FeatureMatrix, top_k: int) -> list[dict]:
    """Rows for a beeswarm plot: attribution plus min-max scaled value.

    Constant features scale to 0.5 for every county.
    """
    if top_k > len(shap.feature_names):
        raise ColumnMismatchError("top_k exceeds the number of features")
    ranking = global_importance(shap)
    rows = []
    for rank, (name, _) in enumerate(ranking.entries[:top_k]):
        j = shap.feature_names.index(name)
        col = matrix.values[:, matrix.column_names.index(name)]
        lo, hi = float(col.min()), float(col.max())
        if hi > lo:
            normalized = (col - lo) / (hi - lo)
        else:
            normalized = np.full(col.shape, 0.5)
        for i in range(matrix.n):
            rows.append(
                {
                    "feature": name,
                    "rank": rank,
                    "fips": shap.row_fips[i],
                    "phi": float(shap.phi[i, j]),
                    "normalized_value": float(normalized[i]),
                }
            )
    return rows
