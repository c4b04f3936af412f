"""County risk stratification: k-means clusters, cluster profiles, the
four-quadrant burden/mortality classification, and the treatment-desert
mortality contrast.

Features are z-scored before clustering so distance is not dominated by
the columns with the largest raw ranges. Cluster quality is scored with
the silhouette coefficient; the number of clusters is chosen by maximum
silhouette with ties to the smaller k.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .data import PREDICTOR_NAMES, FeatureMatrix
from .errors import EmptyGroupError, InputError, ZeroVarianceError
from .rng import stream
from .stats import (  # noqa: F401  (welch_t_test is part of this module's surface)
    compare_groups,
    significance_stars,
    welch_t_test,
)


@dataclass(eq=False)
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, p) in standardized space
    assignments: np.ndarray  # (n,)
    silhouette: float
    column_means: np.ndarray
    column_sds: np.ndarray
    wcss: float
    wcss_trace: list[float]


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    if (sd == 0).all():
        raise ZeroVarianceError("all feature columns are constant")
    scale = np.where(sd == 0, 1.0, sd)
    return (X - mu) / scale, mu, sd


def _as_values(matrix) -> np.ndarray:
    if isinstance(matrix, FeatureMatrix):
        return np.asarray(matrix.values, dtype=float)
    return np.asarray(matrix, dtype=float)


def _plusplus_seed(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distance-squared proportional seeding."""
    n = Z.shape[0]
    centroids = np.empty((k, Z.shape[1]))
    centroids[0] = Z[rng.integers(n)]
    d2 = ((Z - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0:
            centroids[c] = Z[rng.integers(n)]
        else:
            centroids[c] = Z[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((Z - centroids[c]) ** 2).sum(axis=1))
    return centroids


def _lloyd(Z, centroids, max_iter):
    n, k = Z.shape[0], centroids.shape[0]
    assignments = np.full(n, -1)
    trace = []
    for _ in range(max_iter):
        d2 = cdist(Z, centroids, "sqeuclidean")
        new_assignments = d2.argmin(axis=1)
        for c in range(k):
            if not (new_assignments == c).any():
                # reseed an empty cluster at the point farthest from its centroid
                farthest = d2[np.arange(n), new_assignments].argmax()
                centroids[c] = Z[farthest]
                new_assignments[farthest] = c
        trace.append(float(d2[np.arange(n), new_assignments].sum()))
        if (new_assignments == assignments).all():
            break
        assignments = new_assignments
        for c in range(k):
            centroids[c] = Z[assignments == c].mean(axis=0)
    d2 = cdist(Z, centroids, "sqeuclidean")
    wcss = float(d2[np.arange(n), assignments].sum())
    return centroids, assignments, wcss, trace


def kmeans(
    matrix,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    restarts: int = 10,
) -> ClusterModel:
    """Best of ``restarts`` seeded Lloyd runs, scored by within-cluster SS."""
    X = _as_values(matrix)
    n = X.shape[0]
    if k < 2:
        raise InputError("k must be >= 2")
    if n <= k:
        raise InputError(f"need more rows ({n}) than clusters ({k})")
    Z, mu, sd = _standardize(X)

    best = None
    for r in range(restarts):
        rng = stream(seed, f"kmeans.k{k}.restart{r}")
        centroids = _plusplus_seed(Z, k, rng)
        centroids, assignments, wcss, trace = _lloyd(Z, centroids.copy(), max_iter)
        if best is None or wcss < best[0]:
            best = (wcss, r, centroids, assignments, trace)

    wcss, _, centroids, assignments, trace = best
    sil = silhouette_score(Z, assignments)
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments,
        silhouette=sil,
        column_means=mu,
        column_sds=sd,
        wcss=wcss,
        wcss_trace=trace,
    )


def silhouette_samples(X, assignments) -> np.ndarray:
    """Per-point silhouette values; singleton-cluster points score 0."""
    X = _as_values(X)
    assignments = np.asarray(assignments)
    labels = np.unique(assignments)
    if labels.size < 2:
        raise InputError("silhouette requires at least 2 clusters")
    D = cdist(X, X)
    n = X.shape[0]
    scores = np.zeros(n)
    members = {c: assignments == c for c in labels}
    sizes = {c: int(members[c].sum()) for c in labels}
    for i in range(n):
        own = assignments[i]
        if sizes[own] == 1:
            continue
        a = D[i, members[own]].sum() / (sizes[own] - 1)
        b = min(D[i, members[c]].mean() for c in labels if c != own)
        scores[i] = (b - a) / max(a, b)
    return scores


def silhouette_score(X, assignments) -> float:
    return float(silhouette_samples(X, assignments).mean())


def pick_best_k(silhouette_by_k: dict[int, float]) -> int:
    """Largest silhouette wins; exact ties go to the smaller k."""
    best_k, best_sil = None, -np.inf
    for k in sorted(silhouette_by_k):
        if silhouette_by_k[k] > best_sil:
            best_k, best_sil = k, silhouette_by_k[k]
    return best_k


def select_k(
    matrix,
    k_range=range(2, 9),
    seed: int = 0,
    max_iter: int = 300,
    restarts: int = 10,
) -> ClusterModel:
    """Fit every candidate k and keep the model with maximum silhouette."""
    candidates = {}
    for k in sorted(k_range):
        candidates[k] = kmeans(matrix, k, seed=seed, max_iter=max_iter, restarts=restarts)
    best = pick_best_k({k: m.silhouette for k, m in candidates.items()})
    return candidates[best]


def relabel_by_outcome(model: ClusterModel, outcome) -> ClusterModel:
    """Reorder cluster indices so cluster 0 has the lowest mean outcome."""
    outcome = np.asarray(outcome, dtype=float)
    means = np.array([outcome[model.assignments == c].mean() for c in range(model.k)])
    order = np.argsort(means, kind="stable")
    mapping = np.empty(model.k, dtype=np.int64)
    mapping[order] = np.arange(model.k)
    return ClusterModel(
        k=model.k,
        centroids=model.centroids[order],
        assignments=mapping[model.assignments],
        silhouette=model.silhouette,
        column_means=model.column_means,
        column_sds=model.column_sds,
        wcss=model.wcss,
        wcss_trace=list(model.wcss_trace),
    )


# Cluster profile table: SMR plus every predictor, binary flags as counts.
PROFILE_VARIABLES = [("smr", "continuous")] + [
    (name, "binary" if name in ("treatment_desert", "rural") else "continuous")
    for name in PREDICTOR_NAMES
]


@dataclass(frozen=True)
class ProfileRow:
    variable: str
    kind: str
    full_sample: tuple[float, float]
    clusters: list[tuple[float, float]]
    p_value: float  # k=2: the two-cluster test; k>2: smallest pairwise p
    stars: str
    p_pairwise: tuple = ()  # ((i, j, p), ...) for every cluster pair


def _record_column(records, name) -> np.ndarray:
    if name == "smr":
        return np.array([r.smr for r in records], dtype=float)
    idx = PREDICTOR_NAMES.index(name)
    return np.array([r.predictors[idx] for r in records], dtype=float)


def profile_clusters(records, assignments, k: int | None = None) -> list[ProfileRow]:
    """Stratified indicator table with two-group significance tests.

    For k=2 the reported p compares the two clusters directly; for
    larger k it is the smallest pairwise p (a conservative flag that a
    variable separates at least one cluster pair).
    """
    assignments = np.asarray(assignments)
    if len(records) != assignments.size:
        raise InputError("assignments do not match records")
    if k is None:
        k = int(assignments.max()) + 1
    if k < 2:
        raise InputError("profiling needs at least 2 clusters")
    groups = [np.flatnonzero(assignments == c) for c in range(k)]
    if any(g.size == 0 for g in groups):
        raise EmptyGroupError("every cluster must be non-empty")

    rows = []
    for name, kind in PROFILE_VARIABLES:
        col = _record_column(records, name)
        summaries = []
        for g in groups:
            vals = col[g]
            if kind == "binary":
                summaries.append((float(vals.sum()), 100.0 * float(vals.mean())))
            else:
                summaries.append(
                    (float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
                )
        pairwise = tuple(
            (i, j, compare_groups(name, col[groups[i]], col[groups[j]], kind).p_value)
            for i in range(k)
            for j in range(i + 1, k)
        )
        p = min(entry[2] for entry in pairwise)
        if kind == "binary":
            full = (float(col.sum()), 100.0 * float(col.mean()))
        else:
            full = (float(col.mean()), float(col.std(ddof=1)))
        rows.append(
            ProfileRow(
                variable=name,
                kind=kind,
                full_sample=full,
                clusters=summaries,
                p_value=p,
                stars=significance_stars(p),
                p_pairwise=pairwise,
            )
        )
    return rows


@dataclass(frozen=True)
class DesertContrast:
    mean_desert: float
    mean_other: float
    difference: float
    percent_penalty: float
    t: float
    p_value: float
    n_desert: int
    n_other: int


def treatment_desert_contrast(records) -> DesertContrast:
    """Mean-outcome gap between zero-psychiatrist counties and the rest."""
    desert = np.array([r.smr for r in records if r.treatment_desert], dtype=float)
    other = np.array([r.smr for r in records if not r.treatment_desert], dtype=float)
    if desert.size == 0 or other.size == 0:
        raise EmptyGroupError("need both desert and non-desert counties")
    res = welch_t_test(desert, other)
    mean_d, mean_o = float(desert.mean()), float(other.mean())
    return DesertContrast(
        mean_desert=mean_d,
        mean_other=mean_o,
        difference=mean_d - mean_o,
        percent_penalty=100.0 * (mean_d - mean_o) / mean_o,
        t=res.t,
        p_value=res.p,
        n_desert=desert.size,
        n_other=other.size,
    )


class QuadrantLabel(str, enum.Enum):
    CRISIS = "crisis"
    SILENT_RISK = "silent_risk"
    MODERATE_RISK = "moderate_risk"
    LOWER_RISK = "lower_risk"


@dataclass(eq=False)
class QuadrantResult:
    labels: list[QuadrantLabel]
    smr_threshold: float
    burden_threshold: float
    counts: dict[str, int]


def classify_quadrants(records, burden_percentile: float = 60.0, smr_rule="median") -> QuadrantResult:
    """Four-way burden/mortality classification.

    The mortality threshold is the median outcome (or an explicit
    number via smr_rule); the burden threshold is the given percentile
    of the burden score (midpoint interpolation). Values exactly at a
    threshold classify as high.
    """
    smrs = np.array([r.smr for r in records], dtype=float)
    burdens = np.array([r.burden_score for r in records], dtype=float)
    if np.isnan(smrs).any() or np.isnan(burdens).any():
        raise InputError("every record needs an outcome and a burden score")
    if smr_rule == "median":
        smr_threshold = float(np.median(smrs))
    else:
        smr_threshold = float(smr_rule)
    burden_threshold = float(np.percentile(burdens, burden_percentile, method="midpoint"))

    labels = []
    for smr, burden in zip(smrs, burdens):
        high_burden = burden >= burden_threshold
        high_smr = smr >= smr_threshold
        if high_burden and high_smr:
            labels.append(QuadrantLabel.CRISIS)
        elif high_burden:
            labels.append(QuadrantLabel.SILENT_RISK)
        elif high_smr:
            labels.append(QuadrantLabel.MODERATE_RISK)
        else:
            labels.append(QuadrantLabel.LOWER_RISK)
    counts = {label.value: 0 for label in QuadrantLabel}
    for label in labels:
        counts[label.value] += 1
    return QuadrantResult(
        labels=labels,
        smr_threshold=smr_threshold,
        burden_threshold=burden_threshold,
        counts=counts,
    )


SILENT_RISK_COLUMNS = [
    "county",
    "smr",
    "poverty_rate",
    "uninsured_rate",
    "depression_prev",
    "current_smoking",
    "treatment_desert",
    "rural",
    "burden_score",
]


def silent_risk_table(records, labels, top_n: int = 25) -> tuple[list[dict], str | None]:
    """Early-warning counties ranked by burden score, highest first.

    Returns (rows, note); the note is set when there are no counties in
    the silent-risk quadrant.
    """
    silent = [r for r, label in zip(records, labels) if label is QuadrantLabel.SILENT_RISK]
    if not silent:
        return [], "no counties in the silent-risk quadrant"
    order = np.argsort(-np.array([r.burden_score for r in silent]), kind="stable")
    rows = []
    for i in order[:top_n]:
        r = silent[i]
        rows.append(
            {
                "county": r.name,
                "fips": r.fips,
                "smr": r.smr,
                "poverty_rate": r.predictor("poverty_rate"),
                "uninsured_rate": r.predictor("uninsured_rate"),
                "depression_prev": r.predictor("depression_prev"),
                "current_smoking": r.predictor("current_smoking"),
                "treatment_desert": r.treatment_desert,
                "rural": r.rural,
                "burden_score": r.burden_score,
            }
        )
    return rows, None
