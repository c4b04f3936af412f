"""Synthetic input-file generator for desk-scale runs and tests.

Counties sit on a square grid with queen (8-neighbor) adjacency.
Predictors are drawn around plausible county-level ranges and share a
latent deprivation factor so they are realistically correlated. The
outcome construction depends on the scenario:

* ``null``       -- mortality independent of predictors and geography
* ``linear``     -- mortality is a linear blend of a few predictors
* ``threshold``  -- mortality jumps past disability/smoking cut points,
                    with an interaction, which linear fits cannot track
* ``clustered``  -- mortality follows a spatially smoothed grid field

Death counts are rounded from population x rate x target ratio and
suppressed below 10, as at the source. One large observed county is
then adjusted so the pooled observed rate is exactly the planted
reference rate, which lets round-trip checks assert equality rather
than tolerance.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .data import PLACES_PREDICTORS, SVI_PREDICTORS
from .errors import InputError
from .rng import stream

BASE_RATE_PER_100K = 23.91
SCENARIOS = ("linear", "threshold", "clustered", "null")

LINEAR_COEFFICIENTS = {
    "disability_rate": 0.50,
    "current_smoking": 0.35,
    "poverty_rate": 0.30,
    "no_vehicle_access": 0.25,
    "high_blood_pressure": 0.25,
    "psychiatrists_per_100k": -0.20,
}


def _grid_adjacency(n: int, side: int) -> list[tuple[int, int]]:
    """Queen adjacency among the first n cells of a side x side grid."""
    pairs = []
    for i in range(n):
        r, c = divmod(i, side)
        for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < side and 0 <= cc < side:
                j = rr * side + cc
                if j < n:
                    pairs.append((i, j))
    return pairs


def _percentile_of(values: np.ndarray) -> np.ndarray:
    order = values.argsort(kind="stable")
    ranks = np.empty(values.size)
    ranks[order] = (np.arange(values.size) + 0.5) / values.size
    return ranks


def generate(out_dir, n: int, seed: int, scenario: str) -> dict:
    """Write a full synthetic input set; returns the generating parameters."""
    if scenario not in SCENARIOS:
        raise InputError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if n < 20:
        raise InputError("need at least 20 counties")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    side = math.ceil(math.sqrt(n))
    fips = [f"{10001 + i:05d}" for i in range(n)]

    rng = stream(seed, f"synth.{scenario}")
    latent = rng.normal(size=n)

    def blend(base, spread, load, lo, hi):
        noise = math.sqrt(max(0.0, 1.0 - load * load))
        return np.clip(base + spread * (load * latent + noise * rng.normal(size=n)), lo, hi)

    cols = {
        "poverty_rate": blend(21.9, 7.1, 0.80, 2, 60),
        "unemployment_rate": blend(5.3, 1.6, 0.60, 0.5, 25),
        "housing_burden": blend(24.4, 4.7, 0.10, 5, 60),
        "no_hs_diploma": blend(10.5, 4.4, 0.70, 1, 40),
        "uninsured_rate": blend(8.2, 3.7, 0.50, 1, 40),
        "age_65_plus": blend(18.0, 4.3, 0.05, 5, 45),
        "disability_rate": blend(14.9, 3.8, 0.75, 3, 40),
        "single_parent_hh": blend(6.2, 1.8, 0.60, 1, 20),
        "minority_pop": blend(29.1, 19.6, 0.30, 0.5, 98),
        "mobile_homes": blend(9.1, 8.2, 0.70, 0, 60),
        "no_vehicle_access": blend(6.6, 4.7, 0.50, 0.3, 40),
        "depression_prev": blend(22.0, 3.3, 0.50, 8, 40),
        "current_smoking": blend(18.6, 4.2, 0.80, 6, 45),
        "obesity_rate": blend(34.6, 4.9, 0.70, 15, 55),
        "poor_mental_health": blend(15.7, 1.9, 0.80, 7, 30),
        "poor_sleep": blend(34.8, 3.4, 0.60, 20, 52),
        "physical_inactivity": blend(24.3, 4.7, 0.80, 8, 50),
        "binge_drinking": blend(17.3, 2.5, -0.50, 4, 35),
        "diabetes_prev": blend(10.2, 1.9, 0.80, 3, 25),
        "high_blood_pressure": blend(32.0, 4.4, 0.80, 15, 55),
        "primary_care_per_100k": blend(58.3, 30.9, -0.40, 2, 200),
    }
    cols["svi_percentile"] = _percentile_of(0.9 * latent + 0.44 * rng.normal(size=n))

    desert = rng.random(n) < np.where(latent > 0.5, 0.22, 0.10)
    psychiatrists = np.where(desert, 0.0, rng.gamma(2.0, 5.0, size=n))
    cols["psychiatrists_per_100k"] = np.round(psychiatrists, 2)

    rural = (rng.random(n) < np.where(latent > 0, 0.40, 0.18)).astype(float)
    cols["rural"] = rural

    population = np.exp(rng.normal(11.8, 0.8, size=n))
    population = np.where(rural == 1.0, population * 0.35, population)
    population = np.clip(population, 600, 3e6).astype(np.int64)

    def zs(name):
        col = cols[name]
        return (col - col.mean()) / col.std()

    if scenario == "null":
        smr_true = np.exp(0.25 * rng.normal(size=n))
        extras = {}
    elif scenario == "linear":
        signal = sum(beta * zs(name) for name, beta in LINEAR_COEFFICIENTS.items())
        smr_true = np.clip(1.2 + signal + 0.45 * rng.normal(size=n), 0.05, None)
        extras = {"coefficients": LINEAR_COEFFICIENTS, "noise_sd": 0.45}
    elif scenario == "threshold":
        dis_cut = float(np.percentile(cols["disability_rate"], 70))
        smoke_cut = float(np.percentile(cols["current_smoking"], 70))
        hi_dis = cols["disability_rate"] > dis_cut
        hi_smoke = cols["current_smoking"] > smoke_cut
        smr_true = np.clip(
            0.75
            + 0.85 * hi_dis
            + 0.65 * hi_smoke
            + 0.90 * (hi_dis & hi_smoke)
            + 0.10 * zs("poverty_rate")
            + 0.18 * rng.normal(size=n),
            0.05,
            None,
        )
        extras = {"disability_cut": dis_cut, "smoking_cut": smoke_cut}
    else:  # clustered
        field = rng.normal(size=n)
        pairs = _grid_adjacency(n, side)
        neighbors: list[list[int]] = [[] for _ in range(n)]
        for i, j in pairs:
            neighbors[i].append(j)
            neighbors[j].append(i)
        passes = 6
        for _ in range(passes):
            smoothed = field.copy()
            for i in range(n):
                if neighbors[i]:
                    smoothed[i] = 0.45 * field[i] + 0.55 * np.mean(field[neighbors[i]])
            field = smoothed
        field = (field - field.mean()) / field.std()
        smr_true = np.exp(0.55 * field)
        extras = {"smoothing_passes": passes}

    expected = population * BASE_RATE_PER_100K / 1e5
    deaths = np.rint(expected * smr_true).astype(np.int64)
    suppressed = deaths < 10

    # force the pooled observed rate to be exactly the planted rate:
    # rate = 1e5 * D / P is exactly 23.91 when P = 1e7*m and D = 2391*m
    observed_idx = np.flatnonzero(~suppressed)
    if observed_idx.size == 0:
        raise InputError("generated dataset has no observed counties; increase n")
    adjust = observed_idx[np.argmax(population[observed_idx])]
    pop_observed = int(population[observed_idx].sum())
    deaths_observed = int(deaths[observed_idx].sum())
    m = max(1, math.ceil(pop_observed / 1e7))
    while 2391 * m - deaths_observed + deaths[adjust] < 10:
        m += 1
    population[adjust] += int(1e7 * m) - pop_observed
    deaths[adjust] += 2391 * m - deaths_observed

    missing_rng = stream(seed, "synth.missing")
    drop_svi = set(missing_rng.choice(n, size=max(1, n // 40), replace=False).tolist())
    drop_places = set(missing_rng.choice(n, size=max(1, n // 40), replace=False).tolist())
    drop_ahrf = set(missing_rng.choice(n, size=max(1, n // 50), replace=False).tolist())

    def write(name, header, row_fn, skip=frozenset()):
        with open(out_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(n):
                if i in skip:
                    continue
                writer.writerow(row_fn(i))

    write(
        "mortality.csv",
        ["fips", "county_name", "deaths", "population"],
        lambda i: [
            fips[i],
            f"Synth County {i}",
            "Suppressed" if suppressed[i] else int(deaths[i]),
            int(population[i]),
        ],
    )
    write(
        "svi.csv",
        ["fips"] + SVI_PREDICTORS,
        lambda i: [fips[i]] + [repr(round(float(cols[c][i]), 4)) for c in SVI_PREDICTORS],
        skip=drop_svi,
    )
    write(
        "places.csv",
        ["fips"] + PLACES_PREDICTORS,
        lambda i: [fips[i]] + [repr(round(float(cols[c][i]), 4)) for c in PLACES_PREDICTORS],
        skip=drop_places,
    )
    write(
        "ahrf.csv",
        ["fips", "psychiatrists_per_100k", "primary_care_per_100k", "rural"],
        lambda i: [
            fips[i],
            repr(round(float(cols["psychiatrists_per_100k"][i]), 2)),
            repr(round(float(cols["primary_care_per_100k"][i]), 2)),
            int(cols["rural"][i]),
        ],
        skip=drop_ahrf,
    )

    with open(out_dir / "adjacency.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fips_a", "fips_b"])
        for i, j in _grid_adjacency(n, side):
            writer.writerow([fips[i], fips[j]])

    with open(out_dir / "centroids.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fips", "lon", "lat"])
        for i in range(n):
            r, c = divmod(i, side)
            writer.writerow([fips[i], repr(-100.0 + 0.2 * c), repr(35.0 + 0.2 * r)])

    params = {
        "scenario": scenario,
        "seed": seed,
        "n": n,
        "grid_side": side,
        "base_rate_per_100k": BASE_RATE_PER_100K,
        "n_suppressed": int(suppressed.sum()),
        "n_observed": int((~suppressed).sum()),
        "adjusted_fips": fips[adjust],
        "dropped_from_svi": sorted(fips[i] for i in drop_svi),
        "dropped_from_places": sorted(fips[i] for i in drop_places),
        "dropped_from_ahrf": sorted(fips[i] for i in drop_ahrf),
        **extras,
    }
    with open(out_dir / "synth_params.json", "w") as fh:
        json.dump(params, fh, indent=1, sort_keys=True)
    return params
