"""Spatial autocorrelation over the county contiguity graph.

Builds row-standardized weights from an undirected adjacency list, then
computes the global clustering statistic with permutation inference and
the per-county local variant with conditional permutations. Permutation
replicates and counties draw from independent splitmix64 streams seeded
as (derived base seed XOR unit index), so results are identical for any
thread count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit

from .errors import InputError, IsolatedCountyWarning, NumericalError, ZeroVarianceError
from .rng import _U64, derive_seed, next_u64, unit_seed


@dataclass(eq=False)
class SpatialWeights:
    """Row-standardized sparse neighbor structure (CSR layout)."""

    ids: list[str]
    indptr: np.ndarray  # (n+1,)
    indices: np.ndarray
    weights: np.ndarray
    row_standardized: bool
    dropped_pairs: int = 0
    duplicate_pairs: int = 0

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def isolated(self) -> np.ndarray:
        return self.degrees == 0

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[lo:hi]


def build_weights(adjacency_pairs, universe) -> SpatialWeights:
    """Row-standardized binary contiguity weights over ``universe``.

    Pairs touching counties outside the universe are dropped (counted on
    the result); duplicates are deduplicated with a warning; symmetry is
    enforced by closure. Self-pairs are an error. Isolated counties are
    retained with empty rows.
    """
    ids = list(universe)
    index = {fips: i for i, fips in enumerate(ids)}
    if len(index) != len(ids):
        raise InputError("universe contains duplicate FIPS codes")

    edges = set()
    dropped = 0
    duplicates = 0
    for a, b in adjacency_pairs:
        if a == b:
            raise InputError(f"self-pair in adjacency list: {a}")
        if a not in index or b not in index:
            dropped += 1
            continue
        i, j = index[a], index[b]
        key = (min(i, j), max(i, j))
        if key in edges:
            duplicates += 1
            continue
        edges.add(key)
    if duplicates:
        warnings.warn(f"{duplicates} duplicate adjacency pairs ignored", UserWarning)

    neighbor_sets: list[list[int]] = [[] for _ in ids]
    for i, j in edges:
        neighbor_sets[i].append(j)
        neighbor_sets[j].append(i)

    indptr = np.zeros(len(ids) + 1, dtype=np.int64)
    for i, neigh in enumerate(neighbor_sets):
        indptr[i + 1] = indptr[i] + len(neigh)
    indices = np.empty(indptr[-1], dtype=np.int64)
    weights = np.empty(indptr[-1], dtype=np.float64)
    for i, neigh in enumerate(neighbor_sets):
        neigh.sort()
        lo = indptr[i]
        for t, j in enumerate(neigh):
            indices[lo + t] = j
            weights[lo + t] = 1.0 / len(neigh)
    return SpatialWeights(
        ids=ids,
        indptr=indptr,
        indices=indices,
        weights=weights,
        row_standardized=True,
        dropped_pairs=dropped,
        duplicate_pairs=duplicates,
    )


def _compact(values: np.ndarray, w: SpatialWeights):
    """Restrict to non-isolated counties, reindexed 0..n_used-1."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != w.n:
        raise InputError("values must align with the weight structure's ids")
    if not np.isfinite(values).all():
        raise InputError("values must be finite")
    used = ~w.isolated
    n_used = int(used.sum())
    if n_used < w.n:
        warnings.warn(
            f"{w.n - n_used} isolated counties excluded from spatial statistics",
            IsolatedCountyWarning,
        )
    if n_used < 3:
        raise NumericalError("need at least 3 connected counties")
    remap = -np.ones(w.n, dtype=np.int64)
    remap[used] = np.arange(n_used)
    indptr = np.zeros(n_used + 1, dtype=np.int64)
    counts = w.degrees[used]
    indptr[1:] = np.cumsum(counts)
    indices = np.empty(indptr[-1], dtype=np.int64)
    weights = np.empty(indptr[-1], dtype=np.float64)
    pos = 0
    for i in np.flatnonzero(used):
        lo, hi = w.indptr[i], w.indptr[i + 1]
        # a neighbor of a non-isolated county is itself non-isolated (symmetry)
        indices[pos : pos + hi - lo] = remap[w.indices[lo:hi]]
        weights[pos : pos + hi - lo] = w.weights[lo:hi]
        pos += hi - lo
    v = values[used]
    used_ids = [w.ids[i] for i in np.flatnonzero(used)]
    return v, indptr, indices, weights, used_ids, int(w.n - n_used)


def _lag(z, indptr, indices, weights) -> np.ndarray:
    rows = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
    return np.bincount(rows, weights=weights * z[indices], minlength=indptr.size - 1)


def _moran_from_csr(v, indptr, indices, weights) -> float:
    z = v - v.mean()
    denom = float((z**2).sum())
    if denom == 0.0:
        raise ZeroVarianceError("values are constant; statistic undefined")
    s0 = float(weights.sum())
    lag = _lag(z, indptr, indices, weights)
    return (v.size / s0) * float((z * lag).sum()) / denom


def morans_i(values, w: SpatialWeights) -> float:
    """Global spatial autocorrelation over the non-isolated counties."""
    v, indptr, indices, weights, _, _ = _compact(values, w)
    return _moran_from_csr(v, indptr, indices, weights)


@njit(cache=True, nogil=True)
def _global_perm_block(z, indptr, indices, weights, scale, seeds, out, lo, hi):
    n = z.shape[0]
    zp = np.empty(n, np.float64)
    for r in range(lo, hi):
        state = seeds[r]
        for i in range(n):
            zp[i] = z[i]
        for i in range(n - 1, 0, -1):
            state, rv = next_u64(state)
            j = int(rv % _U64(i + 1))
            tmp = zp[i]
            zp[i] = zp[j]
            zp[j] = tmp
        num = 0.0
        for i in range(n):
            s = 0.0
            for e in range(indptr[i], indptr[i + 1]):
                s += weights[e] * zp[indices[e]]
            num += zp[i] * s
        out[r] = scale * num


@dataclass(frozen=True)
class GlobalMoranResult:
    i_obs: float
    p_sim: float
    z_sim: float
    alternative: str
    n_perm: int
    n_used: int
    n_isolated: int
    perm_mean: float
    perm_sd: float
    n_ge: int
    n_le: int


def global_permutation_test(
    values,
    w: SpatialWeights,
    n_perm: int = 999,
    seed: int = 0,
    alternative: str = "directional",
    n_threads: int = 1,
) -> GlobalMoranResult:
    """Permutation inference for the global statistic.

    ``alternative`` controls the reported pseudo p-value:
    "directional" (default) counts replicates at least as extreme in the
    direction of the observed statistic's sign, "greater" always uses
    the upper tail, "less" the lower. The pseudo p is
    (1 + extreme count) / (n_perm + 1) and is never below 1/(n_perm+1).
    """
    if alternative not in ("directional", "greater", "less"):
        raise InputError(f"unknown alternative {alternative!r}")
    v, indptr, indices, weights, _, n_isolated = _compact(values, w)
    n_used = v.size
    z = v - v.mean()
    denom = float((z**2).sum())
    if denom == 0.0:
        raise ZeroVarianceError("values are constant; statistic undefined")
    s0 = float(weights.sum())
    scale = n_used / (s0 * denom)
    i_obs = scale * float((z * _lag(z, indptr, indices, weights)).sum())

    base = derive_seed(seed, "spatial.global_perm")
    seeds = np.array([unit_seed(base, r) for r in range(n_perm)], dtype=np.uint64)
    out = np.empty(n_perm)
    if n_threads > 1 and n_perm >= 2 * n_threads:
        bounds = np.linspace(0, n_perm, n_threads + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = [
                pool.submit(
                    _global_perm_block, z, indptr, indices, weights, scale, seeds,
                    out, int(bounds[b]), int(bounds[b + 1]),
                )
                for b in range(n_threads)
            ]
            for fut in futures:
                fut.result()
    else:
        _global_perm_block(z, indptr, indices, weights, scale, seeds, out, 0, n_perm)

    n_ge = int((out >= i_obs).sum())
    n_le = int((out <= i_obs).sum())
    if alternative == "greater" or (alternative == "directional" and i_obs >= 0):
        p_sim = (1 + n_ge) / (n_perm + 1)
    else:
        p_sim = (1 + n_le) / (n_perm + 1)
    perm_mean = float(out.mean())
    perm_sd = float(out.std())
    z_sim = (i_obs - perm_mean) / perm_sd if perm_sd > 0 else float("inf")
    return GlobalMoranResult(
        i_obs=i_obs,
        p_sim=p_sim,
        z_sim=float(z_sim),
        alternative=alternative,
        n_perm=n_perm,
        n_used=n_used,
        n_isolated=n_isolated,
        perm_mean=perm_mean,
        perm_sd=perm_sd,
        n_ge=n_ge,
        n_le=n_le,
    )


@njit(cache=True, nogil=True)
def _lisa_perm_block(z, indptr, indices, weights, m2, obs_local, seeds, n_perm, ge, le, lo, hi):
    n = z.shape[0]
    pool = np.empty(n - 1, np.int64)
    swaps = np.empty(n, np.int64)
    for i in range(lo, hi):
        deg = indptr[i + 1] - indptr[i]
        if deg == 0:
            continue
        c = 0
        for j in range(n):
            if j != i:
                pool[c] = j
                c += 1
        state = seeds[i]
        zi_over_m2 = z[i] / m2
        n_ge = 0
        n_le = 0
        obs = obs_local[i]
        for _ in range(n_perm):
            lagp = 0.0
            for t in range(deg):
                state, rv = next_u64(state)
                j = t + int(rv % _U64(c - t))
                swaps[t] = j
                tmp = pool[t]
                pool[t] = pool[j]
                pool[j] = tmp
                lagp += weights[indptr[i] + t] * z[pool[t]]
            localp = zi_over_m2 * lagp
            if localp >= obs:
                n_ge += 1
            if localp <= obs:
                n_le += 1
            for t in range(deg - 1, -1, -1):
                j = swaps[t]
                tmp = pool[t]
                pool[t] = pool[j]
                pool[j] = tmp
        ge[i] = n_ge
        le[i] = n_le


@dataclass(eq=False)
class LisaResult:
    """Per-county local statistics over the non-isolated counties."""

    ids: list[str]
    local_i: np.ndarray
    quadrant: list[str]  # HH / HL / LH / LL
    p_sim: np.ndarray
    significant: np.ndarray
    alpha: float
    n_perm: int
    n_isolated: int

    @property
    def counts(self) -> dict[str, int]:
        out = {"HH": 0, "HL": 0, "LH": 0, "LL": 0}
        for q, sig in zip(self.quadrant, self.significant):
            if sig:
                out[q] += 1
        return out


def local_moran(
    values,
    w: SpatialWeights,
    n_perm: int = 999,
    alpha: float = 0.05,
    seed: int = 0,
    n_threads: int = 1,
) -> LisaResult:
    """Local clustering statistics with conditional permutation inference.

    Each county's value is held fixed while the remaining values are
    permuted onto its neighbor positions; the pseudo p is one-sided in
    the direction of the observed local statistic. Quadrants come from
    the signs of (z_i, spatial lag of z_i), zero counting as high.
    """
    v, indptr, indices, weights, used_ids, n_isolated = _compact(values, w)
    n_used = v.size
    z = v - v.mean()
    m2 = float((z**2).sum()) / n_used
    if m2 == 0.0:
        raise ZeroVarianceError("values are constant; statistic undefined")
    lag = _lag(z, indptr, indices, weights)
    local = (z / m2) * lag
    quadrant = [
        ("H" if zi >= 0 else "L") + ("H" if li >= 0 else "L")
        for zi, li in zip(z, lag)
    ]

    base = derive_seed(seed, "spatial.lisa")
    seeds = np.array([unit_seed(base, i) for i in range(n_used)], dtype=np.uint64)
    ge = np.zeros(n_used, dtype=np.int64)
    le = np.zeros(n_used, dtype=np.int64)
    if n_threads > 1 and n_used >= 2 * n_threads:
        bounds = np.linspace(0, n_used, n_threads + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = [
                pool.submit(
                    _lisa_perm_block, z, indptr, indices, weights, m2, local, seeds,
                    n_perm, ge, le, int(bounds[b]), int(bounds[b + 1]),
                )
                for b in range(n_threads)
            ]
            for fut in futures:
                fut.result()
    else:
        _lisa_perm_block(z, indptr, indices, weights, m2, local, seeds, n_perm, ge, le, 0, n_used)

    extreme = np.where(local >= 0, ge, le)
    p_sim = (1.0 + extreme) / (n_perm + 1.0)
    return LisaResult(
        ids=used_ids,
        local_i=local,
        quadrant=quadrant,
        p_sim=p_sim,
        significant=p_sim < alpha,
        alpha=alpha,
        n_perm=n_perm,
        n_isolated=n_isolated,
    )


def lisa_geojson(result: LisaResult, centroids: dict[str, tuple[float, float]]) -> dict:
    """Point FeatureCollection of the local results for external mapping."""
    features = []
    skipped = 0
    for i, fips in enumerate(result.ids):
        if fips not in centroids:
            skipped += 1
            continue
        lon, lat = centroids[fips]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [float(lon), float(lat)]},
                "properties": {
                    "fips": fips,
                    "local_i": float(result.local_i[i]),
                    "quadrant": result.quadrant[i],
                    "p_sim": float(result.p_sim[i]),
                    "significant": bool(result.significant[i]),
                },
            }
        )
    return {
        "type": "FeatureCollection",
        "features": features,
        "metadata": {
            "skipped_missing_centroid": skipped,
            "alpha": result.alpha,
            "n_perm": result.n_perm,
        },
    }
