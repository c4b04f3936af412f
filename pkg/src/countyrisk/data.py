"""County dataset assembly.

Ingests the four tabular sources (mortality, social-vulnerability,
health-behavior prevalence, health-resources), merges them by FIPS code,
computes the pooled reference rate and per-county standardized mortality
ratios, imputes missing predictor cells with column medians, and derives
the structural flags and composite burden score.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    CellParseError,
    DuplicateFipsError,
    EmptyGroupError,
    EmptyJoinError,
    FipsLengthError,
    FullyMissingColumnError,
    NoObservedRecordsError,
    NonNumericFipsError,
    SchemaMismatchError,
    ZeroExpectedDeathsError,
    ZeroRateWarning,
)
from .stats import ComparisonRow, compare_groups

# Canonical predictor order. The first 12 come from the social-vulnerability
# file, the next 9 from the health-behavior file, then the three
# health-resources columns; treatment_desert is derived from psychiatrist
# density after imputation.
SVI_PREDICTORS = [
    "poverty_rate",
    "unemployment_rate",
    "housing_burden",
    "no_hs_diploma",
    "uninsured_rate",
    "svi_percentile",
    "age_65_plus",
    "disability_rate",
    "single_parent_hh",
    "minority_pop",
    "mobile_homes",
    "no_vehicle_access",
]
PLACES_PREDICTORS = [
    "depression_prev",
    "current_smoking",
    "obesity_rate",
    "poor_mental_health",
    "poor_sleep",
    "physical_inactivity",
    "binge_drinking",
    "diabetes_prev",
    "high_blood_pressure",
]
AHRF_PREDICTORS = ["psychiatrists_per_100k", "primary_care_per_100k", "rural"]

PREDICTOR_NAMES = SVI_PREDICTORS + PLACES_PREDICTORS + [
    "psychiatrists_per_100k",
    "primary_care_per_100k",
    "treatment_desert",
    "rural",
]

SOURCE_SCHEMAS = {
    "mortality": ["fips", "county_name", "deaths", "population"],
    "svi": ["fips"] + SVI_PREDICTORS,
    "places": ["fips"] + PLACES_PREDICTORS,
    "ahrf": ["fips"] + AHRF_PREDICTORS,
}

# Ingredients of the composite burden score; psychiatrist density enters
# inverted (low access = high burden).
BURDEN_INDICATORS = [
    "poverty_rate",
    "disability_rate",
    "current_smoking",
    "no_vehicle_access",
    "svi_percentile",
    "uninsured_rate",
    "psychiatrists_per_100k",
]
INVERTED_INDICATORS = {"psychiatrists_per_100k"}


def parse_fips(raw: str) -> str:
    """Normalize a raw FIPS cell to the 5-digit zero-padded form."""
    code = raw.strip()
    if not code or len(code) > 5:
        raise FipsLengthError(f"FIPS code must be 1-5 characters, got {raw!r}")
    if not code.isdigit():
        raise NonNumericFipsError(f"FIPS code contains non-digits: {raw!r}")
    return code.zfill(5)


@dataclass(frozen=True, eq=False)
class CountyRecord:
    """One county's merged row: identity, outcome, predictors, flags."""

    fips: str
    name: str
    population: int
    deaths: int | None
    smr: float | None
    predictors: np.ndarray  # length 25, order PREDICTOR_NAMES, NaN = missing
    suppressed: bool
    treatment_desert: bool
    rural: bool
    burden_score: float  # NaN until computed

    def predictor(self, name: str) -> float:
        return float(self.predictors[PREDICTOR_NAMES.index(name)])


@dataclass(frozen=True)
class ReferenceRate:
    """Pooled deaths per 100,000 persons across the counties it was built from."""

    rate_per_100k: float


@dataclass(eq=False)
class FeatureMatrix:
    """Row-aligned numeric design: values, missingness, outcome, county keys."""

    column_names: list[str]
    values: np.ndarray  # (n, p) float64
    missing_mask: np.ndarray  # (n, p) bool
    outcome: np.ndarray  # (n,) float64
    row_fips: list[str]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            column_names=list(self.column_names),
            values=self.values[rows],
            missing_mask=self.missing_mask[rows],
            outcome=self.outcome[rows],
            row_fips=[self.row_fips[i] for i in rows],
        )


def _parse_numeric(cell: str, column: str, row_number: int, path: str) -> float | None:
    text = cell.strip()
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise CellParseError(
            f"{path}: row {row_number}, column {column!r}: cannot parse {cell!r} as a number"
        ) from None


def load_source(path, schema: str) -> dict[str, dict]:
    """Read one source CSV into a FIPS-keyed table of row fragments.

    Death counts of "Suppressed" (any case) or empty become an absent
    count with the suppressed flag set. Missing predictor cells stay
    missing (imputed downstream). Raises SchemaMismatchError when the
    header lacks required columns, DuplicateFipsError on repeated keys,
    and CellParseError (with the row number) on unparsable numbers.
    """
    if schema not in SOURCE_SCHEMAS:
        raise ValueError(f"unknown source schema {schema!r}")
    required = SOURCE_SCHEMAS[schema]
    path = Path(path)
    table: dict[str, dict] = {}
    with open(path, newline="") as fh:
        # tolerate "# key=value" metadata lines above the header
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(rows)
        except StopIteration:
            raise SchemaMismatchError(f"{path}: empty file") from None
        missing_cols = [c for c in required if c not in header]
        if missing_cols:
            raise SchemaMismatchError(
                f"{path}: missing required column(s) {missing_cols} for schema {schema!r}"
            )
        col = {name: header.index(name) for name in required}
        # optional sentinel column: some mortality exports flag suppression
        # separately instead of (or as well as) writing "Suppressed"
        sentinel_col = header.index("suppressed") if schema == "mortality" and "suppressed" in header else None
        for row_number, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            fips = parse_fips(row[col["fips"]])
            if fips in table:
                raise DuplicateFipsError(f"{path}: row {row_number}: duplicate FIPS {fips}")
            if schema == "mortality":
                raw_deaths = row[col["deaths"]].strip()
                flagged = sentinel_col is not None and row[sentinel_col].strip().lower() in ("1", "true", "yes")
                if raw_deaths == "" or raw_deaths.lower() == "suppressed" or flagged:
                    deaths, suppressed = None, True
                else:
                    value = _parse_numeric(raw_deaths, "deaths", row_number, str(path))
                    if value < 0:
                        raise CellParseError(
                            f"{path}: row {row_number}: deaths must be a non-negative count"
                        )
                    deaths, suppressed = int(round(value)), False
                population = _parse_numeric(row[col["population"]], "population", row_number, str(path))
                if population is None or population <= 0:
                    raise CellParseError(
                        f"{path}: row {row_number}: population must be a positive count"
                    )
                table[fips] = {
                    "name": row[col["county_name"]].strip(),
                    "population": int(population),
                    "deaths": deaths,
                    "suppressed": suppressed,
                }
            else:
                fragment = {}
                for name in required[1:]:
                    fragment[name] = _parse_numeric(row[col[name]], name, row_number, str(path))
                table[fips] = fragment
    return table


def merge_by_fips(mortality, svi, places, ahrf) -> tuple[list[CountyRecord], dict]:
    """Inner-join the predictor sources onto the mortality county set.

    Every mortality county yields a record; predictor cells from absent
    sources stay NaN for later imputation. Raises EmptyJoinError when no
    mortality county appears in any predictor source. Also returns a
    join report with per-source match counts.
    """
    if not mortality:
        raise EmptyJoinError("mortality table is empty")
    sources = {"svi": svi, "places": places, "ahrf": ahrf}
    matched = {name: 0 for name in sources}
    records = []
    for fips in mortality:
        base = mortality[fips]
        predictors = np.full(len(PREDICTOR_NAMES), np.nan)
        for name, table in sources.items():
            fragment = table.get(fips)
            if fragment is None:
                continue
            matched[name] += 1
            for column, value in fragment.items():
                if value is not None:
                    predictors[PREDICTOR_NAMES.index(column)] = value
        psych = predictors[PREDICTOR_NAMES.index("psychiatrists_per_100k")]
        if not np.isnan(psych):
            predictors[PREDICTOR_NAMES.index("treatment_desert")] = float(psych == 0.0)
        records.append(
            CountyRecord(
                fips=fips,
                name=base["name"],
                population=base["population"],
                deaths=base["deaths"],
                smr=None,
                predictors=predictors,
                suppressed=base["suppressed"],
                treatment_desert=bool(psych == 0.0) if not np.isnan(psych) else False,
                rural=False,
                burden_score=float("nan"),
            )
        )
    if all(count == 0 for count in matched.values()):
        raise EmptyJoinError("no mortality county matches any predictor source")
    report = {
        "mortality_rows": len(mortality),
        "records": len(records),
        "suppressed": sum(r.suppressed for r in records),
        "observed": sum(not r.suppressed for r in records),
        "matched": matched,
    }
    return records, report


def compute_reference_rate(records) -> ReferenceRate:
    """Pooled deaths per 100k over the non-suppressed records."""
    observed = [r for r in records if r.deaths is not None]
    if not observed:
        raise NoObservedRecordsError("no records with observed death counts")
    total_deaths = sum(r.deaths for r in observed)
    total_population = sum(r.population for r in observed)
    if total_population <= 0:
        raise NoObservedRecordsError("total population is zero")
    rate = 1e5 * total_deaths / total_population
    if rate == 0.0:
        warnings.warn("pooled reference rate is zero", ZeroRateWarning)
    return ReferenceRate(rate_per_100k=rate)


def compute_smr(deaths: int, population: int, rate: ReferenceRate) -> float:
    """Observed deaths over expected deaths (population x rate / 100k)."""
    expected = population * rate.rate_per_100k / 1e5
    if expected <= 0.0:
        raise ZeroExpectedDeathsError(
            f"expected deaths is {expected}; need population > 0 and rate > 0"
        )
    return deaths / expected


def feature_matrix(records) -> FeatureMatrix:
    """Stack records into a design matrix; outcome is SMR (NaN if absent)."""
    values = np.array([r.predictors for r in records], dtype=float).reshape(
        len(records), len(PREDICTOR_NAMES)
    )
    outcome = np.array([np.nan if r.smr is None else r.smr for r in records])
    return FeatureMatrix(
        column_names=list(PREDICTOR_NAMES),
        values=values,
        missing_mask=np.isnan(values),
        outcome=outcome,
        row_fips=[r.fips for r in records],
    )


def impute_medians(matrix: FeatureMatrix) -> FeatureMatrix:
    """Replace each missing cell with its column's median of observed values."""
    values = matrix.values.copy()
    for j in range(matrix.p):
        col = values[:, j]
        observed = col[~matrix.missing_mask[:, j]]
        if observed.size == 0:
            raise FullyMissingColumnError(
                f"column {matrix.column_names[j]!r} has no observed values"
            )
        col[matrix.missing_mask[:, j]] = np.median(observed)
    return FeatureMatrix(
        column_names=list(matrix.column_names),
        values=values,
        missing_mask=np.zeros_like(matrix.missing_mask),
        outcome=matrix.outcome.copy(),
        row_fips=list(matrix.row_fips),
    )


def midpoint_rank(sorted_values: np.ndarray, value: float) -> float:
    """Midpoint percentile rank: (count_less + 0.5 * count_equal) / n."""
    left = np.searchsorted(sorted_values, value, side="left")
    right = np.searchsorted(sorted_values, value, side="right")
    return (left + 0.5 * (right - left)) / sorted_values.size


def build_percentile_tables(records, indicators=BURDEN_INDICATORS) -> dict[str, np.ndarray]:
    """Sorted indicator columns for midpoint-rank lookups (post-imputation)."""
    tables = {}
    for name in indicators:
        idx = PREDICTOR_NAMES.index(name)
        col = np.array([r.predictors[idx] for r in records], dtype=float)
        if np.isnan(col).any():
            raise FullyMissingColumnError(
                f"indicator {name!r} still has missing values; impute first"
            )
        tables[name] = np.sort(col)
    return tables


def compute_burden_score(record: CountyRecord, percentile_tables: dict[str, np.ndarray]) -> float:
    """Mean midpoint percentile rank over the burden indicators.

    Psychiatrist density is inverted (1 - rank) so that zero access
    raises the score. The result lies strictly inside (0, 1).
    """
    ranks = []
    for name, sorted_values in percentile_tables.items():
        rank = midpoint_rank(sorted_values, record.predictor(name))
        if name in INVERTED_INDICATORS:
            rank = 1.0 - rank
        ranks.append(rank)
    return float(np.mean(ranks))


# Table-shaped comparison of observed vs suppressed counties.
SUPPRESSED_PROFILE_INDICATORS = [
    ("poverty_rate", "continuous"),
    ("uninsured_rate", "continuous"),
    ("no_hs_diploma", "continuous"),
    ("minority_pop", "continuous"),
    ("svi_percentile", "continuous"),
    ("population", "continuous"),
    ("rural", "binary"),
    ("treatment_desert", "binary"),
]


def suppressed_profile(records) -> list[ComparisonRow]:
    """Observed-vs-suppressed comparison on the key structural indicators."""
    observed = [r for r in records if not r.suppressed]
    suppressed = [r for r in records if r.suppressed]
    if not observed or not suppressed:
        raise EmptyGroupError("need both observed and suppressed counties")

    def column(group, name):
        if name == "population":
            return np.array([r.population for r in group], dtype=float)
        if name == "rural":
            return np.array([r.rural for r in group], dtype=float)
        if name == "treatment_desert":
            return np.array([r.treatment_desert for r in group], dtype=float)
        idx = PREDICTOR_NAMES.index(name)
        return np.array([r.predictors[idx] for r in group], dtype=float)

    return [
        compare_groups(name, column(observed, name), column(suppressed, name), kind)
        for name, kind in SUPPRESSED_PROFILE_INDICATORS
    ]


@dataclass
class AnalyticDataset:
    """Final merged dataset plus the pooled rate and join report."""

    records: list[CountyRecord]
    reference_rate: ReferenceRate
    join_report: dict

    @property
    def observed(self) -> list[CountyRecord]:
        return [r for r in self.records if not r.suppressed]

    @property
    def suppressed(self) -> list[CountyRecord]:
        return [r for r in self.records if r.suppressed]


def assemble_dataset(mortality, svi, places, ahrf) -> AnalyticDataset:
    """Full assembly: merge, pooled rate, SMR, imputation, flags, burden.

    The flags and the derived treatment-desert predictor are recomputed
    from the post-imputation psychiatrist density, which keeps the
    desert flag consistent with the predictor column on every record.
    Burden percentile tables are built over observed counties and
    applied to all records.
    """
    merged, report = merge_by_fips(mortality, svi, places, ahrf)
    rate = compute_reference_rate(merged)

    matrix = impute_medians(feature_matrix(merged))
    psych_col = matrix.column_names.index("psychiatrists_per_100k")
    desert_col = matrix.column_names.index("treatment_desert")
    rural_col = matrix.column_names.index("rural")
    matrix.values[:, desert_col] = (matrix.values[:, psych_col] == 0.0).astype(float)

    records = []
    for i, record in enumerate(merged):
        smr = None
        if record.deaths is not None and rate.rate_per_100k > 0:
            smr = compute_smr(record.deaths, record.population, rate)
        records.append(
            replace(
                record,
                smr=smr,
                predictors=matrix.values[i].copy(),
                treatment_desert=bool(matrix.values[i, desert_col] == 1.0),
                rural=bool(matrix.values[i, rural_col] >= 0.5),
            )
        )

    observed = [r for r in records if not r.suppressed]
    tables = build_percentile_tables(observed)
    records = [
        replace(r, burden_score=compute_burden_score(r, tables)) for r in records
    ]
    report = dict(report, reference_rate_per_100k=rate.rate_per_100k)
    return AnalyticDataset(records=records, reference_rate=rate, join_report=report)


DATASET_COLUMNS = [
    "fips",
    "name",
    "population",
    "deaths",
    "suppressed",
    "smr",
    "treatment_desert",
    "rural",
    "burden_score",
] + PREDICTOR_NAMES


def write_dataset_csv(records, path, meta: dict | None = None) -> None:
    """Write records as CSV; floats use repr so reloads are bit-exact."""
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        writer = csv.writer(fh)
        writer.writerow(DATASET_COLUMNS)
        for r in records:
            row = [
                r.fips,
                r.name,
                r.population,
                "" if r.deaths is None else r.deaths,
                int(r.suppressed),
                "" if r.smr is None else repr(r.smr),
                int(r.treatment_desert),
                int(r.rural),
                repr(r.burden_score),
            ]
            row.extend(repr(float(v)) for v in r.predictors)
            writer.writerow(row)


def read_dataset_csv(path) -> list[CountyRecord]:
    """Inverse of write_dataset_csv.

    Columns are read positionally: the flag columns near the front and
    the predictor block share the treatment_desert/rural names.
    """
    records = []
    n_fixed = 9  # fips..burden_score, then the predictor block
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows)
        if header != DATASET_COLUMNS:
            raise SchemaMismatchError(f"{path}: not a dataset file written by this tool")
        for row in rows:
            predictors = np.array([float(v) for v in row[n_fixed:]], dtype=float)
            records.append(
                CountyRecord(
                    fips=row[0],
                    name=row[1],
                    population=int(row[2]),
                    deaths=None if row[3] == "" else int(row[3]),
                    smr=None if row[5] == "" else float(row[5]),
                    predictors=predictors,
                    suppressed=row[4] == "1",
                    treatment_desert=row[6] == "1",
                    rural=row[7] == "1",
                    burden_score=float(row[8]),
                )
            )
    return records
