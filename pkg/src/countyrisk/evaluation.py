"""Cross-validation harness and the six-metric evaluation suite.

Metrics are computed on pooled out-of-fold predictions; R^2 and RMSE are
also retained per fold with their mean and standard deviation for the
comparison table. The acceptable-prediction band is |error| <= 0.25
outcome units.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import FeatureMatrix
from .errors import (
    DegenerateTestWarning,
    InputError,
    NoHighRiskCountiesError,
    NumericalError,
    ZeroVarianceError,
)
from .rng import stream

ACCEPTABLE_BAND = 0.25


@dataclass(frozen=True)
class FoldPlan:
    n: int
    k: int
    assignments: np.ndarray  # length n, values in [0, k)
    seed: int

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def make_folds(n: int, k: int, seed: int) -> FoldPlan:
    """Seeded uniform shuffle, then round-robin fold assignment."""
    if k < 2:
        raise InputError("need at least 2 folds")
    if n < k:
        raise InputError(f"cannot split {n} rows into {k} folds")
    rng = stream(seed, "cv.folds")
    perm = rng.permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    for i in range(n):
        assignments[perm[i]] = i % k
    return FoldPlan(n=n, k=k, assignments=assignments, seed=seed)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        warnings.warn("correlation undefined for constant input", DegenerateTestWarning)
        return float("nan")
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def metric_suite(y, yhat) -> dict:
    """Pooled regression metrics for one prediction vector.

    r2 = 1 - SS_res / SS_tot, rmse, mae, mape (percent), pearson,
    spearman (pearson of midpoint ranks), and the fraction of
    predictions within the acceptable band. Raises ZeroVarianceError if
    the outcome is constant and NumericalError if mape is requested with
    a zero outcome value.
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size < 2:
        raise InputError("y and yhat must be equal-length vectors of size >= 2")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ZeroVarianceError("outcome variance is zero; r2 undefined")
    if (y == 0).any():
        raise NumericalError("mape undefined: outcome contains zero values")
    err = y - yhat
    return {
        "r2": 1.0 - float((err**2).sum()) / ss_tot,
        "rmse": float(np.sqrt((err**2).mean())),
        "mae": float(np.abs(err).mean()),
        "mape": 100.0 * float(np.abs(err / y).mean()),
        "pearson": _pearson(y, yhat),
        "spearman": _pearson(rankdata(y, method="average"), rankdata(yhat, method="average")),
        "within_band_frac": float((np.abs(err) <= ACCEPTABLE_BAND).mean()),
    }


def high_risk_recall(y, yhat) -> float:
    """Fraction of above-average counties ranked in the top predicted half.

    A county counts as high risk when y > 1.0; the top half is the
    ceil(n/2) rows with the largest predictions, ties broken by row
    order.
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.size < 2:
        raise InputError("y and yhat must be equal-length vectors of size >= 2")
    high = y > 1.0
    if not high.any():
        raise NoHighRiskCountiesError("no county has outcome above 1.0")
    top = np.argsort(-yhat, kind="stable")[: math.ceil(y.size / 2)]
    in_top = np.zeros(y.size, dtype=bool)
    in_top[top] = True
    return float((high & in_top).sum() / high.sum())


@dataclass
class MetricReport:
    model: str
    r2: float
    rmse: float
    mae: float
    mape: float
    spearman: float
    pearson: float
    high_risk_recall: float
    within_band_frac: float
    r2_folds: list[float] = field(default_factory=list)
    rmse_folds: list[float] = field(default_factory=list)
    r2_mean: float = float("nan")
    r2_sd: float = float("nan")
    rmse_mean: float = float("nan")
    rmse_sd: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cross_validate(matrix: FeatureMatrix, fitter, folds: FoldPlan, name: str = "model") -> MetricReport:
    """Out-of-fold evaluation: fit on k-1 folds, predict the held-out one.

    All pooled metrics come from the single out-of-fold prediction
    vector; r2/rmse are additionally tracked per fold. Training failures
    propagate tagged with the fold id. High-risk recall is NaN when no
    held-out outcome exceeds 1.0.
    """
    if folds.n != matrix.n:
        raise InputError("fold plan does not match the matrix")
    oof = np.empty(matrix.n)
    r2_folds, rmse_folds = [], []
    for f in range(folds.k):
        train, test = folds.train_rows(f), folds.test_rows(f)
        try:
            model = fitter(matrix.take(train))
            preds = model.predict(matrix.take(test))
        except Exception as exc:
            raise NumericalError(f"{name}: training failed in fold {f}: {exc}") from exc
        oof[test] = preds
        fold_err = matrix.outcome[test] - preds
        fold_tot = float(((matrix.outcome[test] - matrix.outcome[test].mean()) ** 2).sum())
        r2_folds.append(
            1.0 - float((fold_err**2).sum()) / fold_tot if fold_tot > 0 else float("nan")
        )
        rmse_folds.append(float(np.sqrt((fold_err**2).mean())))

    pooled = metric_suite(matrix.outcome, oof)
    try:
        recall = high_risk_recall(matrix.outcome, oof)
    except NoHighRiskCountiesError:
        recall = float("nan")
    r2_arr, rmse_arr = np.array(r2_folds), np.array(rmse_folds)
    return MetricReport(
        model=name,
        high_risk_recall=recall,
        r2_folds=r2_folds,
        rmse_folds=rmse_folds,
        r2_mean=float(r2_arr.mean()),
        r2_sd=float(r2_arr.std(ddof=1)),
        rmse_mean=float(rmse_arr.mean()),
        rmse_sd=float(rmse_arr.std(ddof=1)),
        **pooled,
    )


def compare_models(matrix: FeatureMatrix, families: dict, folds: FoldPlan) -> list[MetricReport]:
    """Evaluate each family under the shared fold plan; sort by pooled r2."""
    reports = [
        cross_validate(matrix, fitter, folds, name=name)
        for name, fitter in families.items()
    ]
    reports.sort(key=lambda r: -r.r2)
    return reports
