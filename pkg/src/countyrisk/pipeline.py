"""Batch pipeline: configuration, stage functions, and the run manifest.

Each stage reads its input files, writes its outputs under the run
directory, and embeds the seed and tool version in every file (as a
"# key=value" comment line for CSV, a "_meta" object for JSON). Stage
outputs carry no wall-clock timestamps, so re-running with identical
inputs and configuration reproduces byte-identical files; wall times go
to run_log.json, which is not part of the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import beeswarm_export, dependence_export, global_importance, tree_shap
from .clustering import (
    classify_quadrants,
    profile_clusters,
    relabel_by_outcome,
    select_k,
    silent_risk_table,
    treatment_desert_contrast,
)
from .data import (
    assemble_dataset,
    feature_matrix,
    load_source,
    parse_fips,
    read_dataset_csv,
    suppressed_profile,
    write_dataset_csv,
)
from .errors import InputError, MissingStageError
from .evaluation import compare_models, make_folds
from .models import (
    GBTModel,
    TrainConfig,
    fit_gbt,
    fit_lasso,
    fit_linear,
    fit_random_forest,
    load_model,
    save_model,
)
from .spatial import build_weights, global_permutation_test, lisa_geojson, local_moran
from .synth import generate as synth_generate


@dataclass
class RunConfig:
    """Everything a run needs; file values are overridden by CLI flags."""

    mortality: str = "mortality.csv"
    svi: str = "svi.csv"
    places: str = "places.csv"
    ahrf: str = "ahrf.csv"
    adjacency: str = "adjacency.csv"
    centroids: str = ""
    out_dir: str = "out"
    seed: int = 0
    folds: int = 5
    permutations: int = 999
    alpha: float = 0.05
    threads: int = 1
    top_n: int = 25
    beeswarm_top_k: int = 10
    burden_percentile: float = 60.0
    kmeans_k_min: int = 2
    kmeans_k_max: int = 8
    kmeans_restarts: int = 10
    n_rounds: int = 500
    learning_rate: float = 0.05
    max_depth: int = 4
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    subsample: float = 0.8
    colsample: float = 0.8
    rf_trees: int = 300
    rf_depth: int = 12
    rf_mtry: int = 0  # 0 = p // 3
    lasso_inner_folds: int = 5
    moran_alternative: str = "directional"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            n_rounds=self.n_rounds,
            learning_rate=self.learning_rate,
            max_depth=self.max_depth,
            min_child_weight=self.min_child_weight,
            reg_lambda=self.reg_lambda,
            gamma=self.gamma,
            subsample=self.subsample,
            colsample=self.colsample,
            seed=self.seed,
        )

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


_INT_KEYS = {f.name for f in fields(RunConfig) if f.type == "int"}
_FLOAT_KEYS = {f.name for f in fields(RunConfig) if f.type == "float"}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if config_path:
        raw.update(parse_config_file(config_path))
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise InputError(f"unknown configuration keys: {sorted(unknown)}")
    converted = {}
    for key, value in raw.items():
        if key in _INT_KEYS:
            converted[key] = int(value)
        elif key in _FLOAT_KEYS:
            converted[key] = float(value)
        else:
            converted[key] = str(value)
    return RunConfig(**converted)


def _meta(config: RunConfig) -> dict:
    return {"seed": config.seed, "version": __version__}


def _jsonable(value):
    """Strict-JSON payloads: non-finite floats become null."""
    if isinstance(value, float):
        return value if np.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_json(path: Path, payload: dict, config: RunConfig) -> None:
    payload = dict(payload)
    payload["_meta"] = _meta(config)
    path.write_text(json.dumps(_jsonable(payload), indent=1, sort_keys=True) + "\n")


def _write_rows_csv(path: Path, header: list[str], rows: list[list], config: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={config.seed} version={__version__}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingStageError(f"{path} not found; run the {stage} stage first")
    return path


def _require_input(path_str: str, name: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise InputError(f"missing {name} file: {path}")
    return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_ingest(config: RunConfig) -> dict:
    """Merge the four sources; write the analytic dataset and reports."""
    config.out.mkdir(parents=True, exist_ok=True)
    tables = {
        name: load_source(_require_input(getattr(config, name), name), name)
        for name in ("mortality", "svi", "places", "ahrf")
    }
    dataset = assemble_dataset(tables["mortality"], tables["svi"], tables["places"], tables["ahrf"])

    counties = config.out / "counties.csv"
    suppressed = config.out / "suppressed.csv"
    write_dataset_csv(dataset.observed, counties, meta=_meta(config))
    write_dataset_csv(dataset.suppressed, suppressed, meta=_meta(config))
    _write_json(
        config.out / "reference_rate.json",
        {"rate_per_100k": dataset.reference_rate.rate_per_100k},
        config,
    )
    _write_json(config.out / "join_report.json", dataset.join_report, config)

    profile_rows = []
    if dataset.observed and dataset.suppressed:
        for row in suppressed_profile(dataset.records):
            profile_rows.append(
                [
                    row.variable,
                    row.kind,
                    _fmt(row.group_a[0]),
                    _fmt(row.group_a[1]),
                    _fmt(row.group_b[0]),
                    _fmt(row.group_b[1]),
                    _fmt(row.p_value),
                    row.stars,
                ]
            )
    _write_rows_csv(
        config.out / "suppressed_profile.csv",
        ["variable", "kind", "observed_mean_or_n", "observed_sd_or_pct",
         "suppressed_mean_or_n", "suppressed_sd_or_pct", "p_value", "stars"],
        profile_rows,
        config,
    )
    return {
        "counties": str(counties),
        "suppressed": str(suppressed),
        "observed_count": len(dataset.observed),
        "suppressed_count": len(dataset.suppressed),
        "rate_per_100k": dataset.reference_rate.rate_per_100k,
    }


def _load_observed_matrix(config: RunConfig):
    records = read_dataset_csv(_require(config.out / "counties.csv", "ingest"))
    matrix = feature_matrix(records)
    if np.isnan(matrix.outcome).any():
        raise InputError("observed dataset contains rows without an outcome")
    return records, matrix


def model_families(config: RunConfig, p: int) -> dict:
    """The four fitters evaluated under shared folds."""
    mtry = config.rf_mtry if config.rf_mtry > 0 else max(1, p // 3)
    return {
        "gbt": lambda m: fit_gbt(m, config.train_config()),
        "random_forest": lambda m: fit_random_forest(
            m, n_trees=config.rf_trees, max_depth=config.rf_depth, mtry=mtry, seed=config.seed
        ),
        "linear": lambda m: fit_linear(m),
        "lasso": lambda m: fit_lasso(
            m, inner_folds=config.lasso_inner_folds, seed=config.seed
        ),
    }


def cmd_train(config: RunConfig) -> dict:
    """Cross-validate the four families; persist the comparison and models."""
    _, matrix = _load_observed_matrix(config)
    folds = make_folds(matrix.n, config.folds, config.seed)
    reports = compare_models(matrix, model_families(config, matrix.p), folds)

    header = [
        "model", "r2", "r2_mean", "r2_sd", "rmse", "rmse_mean", "rmse_sd",
        "mae", "mape", "spearman", "pearson", "high_risk_recall", "within_band_frac",
    ]
    rows = [
        [
            r.model, _fmt(r.r2), _fmt(r.r2_mean), _fmt(r.r2_sd), _fmt(r.rmse),
            _fmt(r.rmse_mean), _fmt(r.rmse_sd), _fmt(r.mae), _fmt(r.mape),
            _fmt(r.spearman), _fmt(r.pearson), _fmt(r.high_risk_recall),
            _fmt(r.within_band_frac),
        ]
        for r in reports
    ]
    _write_rows_csv(config.out / "comparison.csv", header, rows, config)
    _write_json(
        config.out / "comparison.json",
        {"models": [r.to_dict() for r in reports], "folds": config.folds,
         "metrics_pooling": "pooled out-of-fold; r2/rmse also per fold"},
        config,
    )

    families = model_families(config, matrix.p)
    gbt = families["gbt"](matrix)
    save_model(gbt, config.out / "model_gbt.json", meta=_meta(config))
    best_name = reports[0].model
    best = gbt if best_name == "gbt" else families[best_name](matrix)
    save_model(best, config.out / "best_model.json", meta=_meta(config))
    _write_json(
        config.out / "cv_metrics.json",
        {"best_model": best_name, "reports": [r.to_dict() for r in reports]},
        config,
    )
    return {"best_model": best_name, "reports": reports}


def cmd_explain(config: RunConfig) -> dict:
    """Attribution outputs for the boosted model."""
    _, matrix = _load_observed_matrix(config)
    model = load_model(_require(config.out / "model_gbt.json", "train"))
    if not isinstance(model, GBTModel):
        raise InputError("model_gbt.json does not contain a boosted tree model")
    shap = tree_shap(model, matrix, n_threads=config.threads)
    ranking = global_importance(shap)
    _write_json(
        config.out / "importance.json",
        {
            "base_value": shap.base_value,
            "ranking": [{"feature": name, "mean_abs_phi": score} for name, score in ranking.entries],
            "expectations": "path-dependent (tree cover weighting)",
        },
        config,
    )
    rows = [
        [r["feature"], r["rank"], r["fips"], _fmt(r["phi"]), _fmt(r["normalized_value"])]
        for r in beeswarm_export(shap, matrix, min(config.beeswarm_top_k, matrix.p))
    ]
    _write_rows_csv(
        config.out / "beeswarm.csv",
        ["feature", "rank", "fips", "phi", "normalized_value"],
        rows,
        config,
    )
    top4 = [name for name, _ in ranking.entries[:4]]
    for name in top4:
        rows = [
            [r["feature"], _fmt(r["value"]), _fmt(r["phi"]), r["fips"]]
            for r in dependence_export(shap, matrix, name)
        ]
        _write_rows_csv(
            config.out / f"dependence_{name}.csv",
            ["feature", "value", "phi", "fips"],
            rows,
            config,
        )
    return {"top4": top4, "base_value": shap.base_value}


def cmd_cluster(config: RunConfig) -> dict:
    """Clustering, cluster profile, quadrants, and the desert contrast."""
    records, matrix = _load_observed_matrix(config)
    model = select_k(
        matrix,
        k_range=range(config.kmeans_k_min, config.kmeans_k_max + 1),
        seed=config.seed,
        restarts=config.kmeans_restarts,
    )
    model = relabel_by_outcome(model, matrix.outcome)

    profile = profile_clusters(records, model.assignments)
    rows = []
    for row in profile:
        cluster_cells = []
        for mean, sd in row.clusters:
            cluster_cells.extend([_fmt(mean), _fmt(sd)])
        rows.append(
            [row.variable, row.kind, _fmt(row.full_sample[0]), _fmt(row.full_sample[1])]
            + cluster_cells
            + [_fmt(row.p_value), row.stars]
        )
    cluster_header = []
    for c in range(model.k):
        cluster_header.extend([f"cluster{c}_mean_or_n", f"cluster{c}_sd_or_pct"])
    _write_rows_csv(
        config.out / "cluster_profile.csv",
        ["variable", "kind", "full_mean_or_n", "full_sd_or_pct"]
        + cluster_header
        + ["p_value", "stars"],
        rows,
        config,
    )

    quadrants = classify_quadrants(records, burden_percentile=config.burden_percentile)
    with open(config.out / "quadrants.csv", "w", newline="") as fh:
        fh.write(
            f"# seed={config.seed} version={__version__}"
            f" smr_threshold={quadrants.smr_threshold!r}"
            f" burden_threshold={quadrants.burden_threshold!r}\n"
        )
        writer = csv.writer(fh)
        writer.writerow(["fips", "burden_score", "smr", "label"])
        writer.writerows(
            [r.fips, _fmt(r.burden_score), _fmt(r.smr), label.value]
            for r, label in zip(records, quadrants.labels)
        )
    _write_json(
        config.out / "quadrant_counts.json",
        {
            "counts": quadrants.counts,
            "smr_threshold": quadrants.smr_threshold,
            "burden_threshold": quadrants.burden_threshold,
            "burden_percentile": config.burden_percentile,
            "k": model.k,
            "silhouette": model.silhouette,
        },
        config,
    )

    table, note = silent_risk_table(records, quadrants.labels, top_n=config.top_n)
    rows = [
        [
            r["county"], r["fips"], _fmt(r["smr"]), _fmt(r["poverty_rate"]),
            _fmt(r["uninsured_rate"]), _fmt(r["depression_prev"]), _fmt(r["current_smoking"]),
            int(r["treatment_desert"]), int(r["rural"]), _fmt(r["burden_score"]),
        ]
        for r in table
    ]
    if note:
        rows = [[note] + [""] * 9]
    _write_rows_csv(
        config.out / "silent_risk.csv",
        [
            "county", "fips", "smr", "poverty_rate", "uninsured_rate",
            "depression_prev", "current_smoking", "treatment_desert", "rural", "burden_score",
        ],
        rows,
        config,
    )

    contrast = treatment_desert_contrast(records)
    _write_json(config.out / "desert_contrast.json", asdict(contrast), config)
    return {"k": model.k, "silhouette": model.silhouette, "counts": quadrants.counts}


def cmd_spatial(config: RunConfig) -> dict:
    """Global and local autocorrelation of the observed outcome."""
    records, matrix = _load_observed_matrix(config)
    adjacency_path = _require_input(config.adjacency, "adjacency")
    pairs = []
    with open(adjacency_path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rows)
        if header[:2] != ["fips_a", "fips_b"]:
            raise InputError(f"{adjacency_path}: expected header fips_a,fips_b")
        for row in rows:
            if row:
                pairs.append((parse_fips(row[0]), parse_fips(row[1])))
    weights = build_weights(pairs, [r.fips for r in records])

    values = matrix.outcome
    result = global_permutation_test(
        values,
        weights,
        n_perm=config.permutations,
        seed=config.seed,
        alternative=config.moran_alternative,
        n_threads=config.threads,
    )
    _write_json(
        config.out / "moran_global.json",
        {
            "I": result.i_obs,
            "p_sim": result.p_sim,
            "z_sim": result.z_sim,
            "alternative": result.alternative,
            "n_perm": result.n_perm,
            "n_used": result.n_used,
            "n_isolated": result.n_isolated,
            "perm_mean": result.perm_mean,
            "perm_sd": result.perm_sd,
            "dropped_pairs": weights.dropped_pairs,
        },
        config,
    )

    lisa = local_moran(
        values,
        weights,
        n_perm=config.permutations,
        alpha=config.alpha,
        seed=config.seed,
        n_threads=config.threads,
    )
    _write_rows_csv(
        config.out / "lisa.csv",
        ["fips", "local_i", "quadrant", "p_sim", "significant"],
        [
            [lisa.ids[i], _fmt(float(lisa.local_i[i])), lisa.quadrant[i],
             _fmt(float(lisa.p_sim[i])), int(lisa.significant[i])]
            for i in range(len(lisa.ids))
        ],
        config,
    )
    counts = lisa.counts
    if config.centroids:
        centroids = {}
        with open(_require_input(config.centroids, "centroids"), newline="") as fh:
            rows = csv.reader(line for line in fh if not line.startswith("#"))
            next(rows)
            for row in rows:
                if row:
                    centroids[parse_fips(row[0])] = (float(row[1]), float(row[2]))
        doc = lisa_geojson(lisa, centroids)
        doc["metadata"]["seed"] = config.seed
        doc["metadata"]["version"] = __version__
        (config.out / "lisa_map.geojson").write_text(
            json.dumps(doc, indent=1, sort_keys=True) + "\n"
        )
    return {"I": result.i_obs, "p_sim": result.p_sim, "hotspots": counts["HH"], "coldspots": counts["LL"]}


def cmd_synth(config: RunConfig, n: int, scenario: str) -> dict:
    """Generate a synthetic input set under the output directory."""
    return synth_generate(config.out, n=n, seed=config.seed, scenario=scenario)


STAGE_OUTPUTS = {
    "ingest": ["counties.csv", "suppressed.csv", "reference_rate.json", "join_report.json", "suppressed_profile.csv"],
    "train": ["comparison.csv", "comparison.json", "cv_metrics.json", "model_gbt.json", "best_model.json"],
    "explain": ["importance.json", "beeswarm.csv"],
    "cluster": ["cluster_profile.csv", "quadrants.csv", "quadrant_counts.json", "silent_risk.csv", "desert_contrast.json"],
    "spatial": ["moran_global.json", "lisa.csv"],
}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# Keys describing where a run happened or how it was scheduled, not what
# was computed; excluded from the manifest's config echo so reruns in a
# different directory or thread count stay byte-identical.
_EXECUTION_KEYS = {
    "out_dir", "threads", "mortality", "svi", "places", "ahrf", "adjacency", "centroids",
}


def cmd_report(config: RunConfig) -> dict:
    """Bundle stage outputs into one report and write the run manifest."""
    digests: dict[str, dict[str, str]] = {}
    for stage, names in STAGE_OUTPUTS.items():
        digests[stage] = {}
        for name in names:
            path = config.out / name
            if not path.exists():
                raise MissingStageError(f"{path} missing; run the {stage} stage first")
            digests[stage][name] = _digest(path)
    # stage-dependent extras (dependence exports, map document)
    for extra in sorted(config.out.glob("dependence_*.csv")):
        digests["explain"][extra.name] = _digest(extra)
    map_doc = config.out / "lisa_map.geojson"
    if map_doc.exists():
        digests["spatial"][map_doc.name] = _digest(map_doc)

    join_report = json.loads((config.out / "join_report.json").read_text())
    quadrant_counts = json.loads((config.out / "quadrant_counts.json").read_text())
    moran = json.loads((config.out / "moran_global.json").read_text())
    comparison = json.loads((config.out / "comparison.json").read_text())

    manifest = {
        "tool": "countyrisk",
        "version": __version__,
        "config": {k: v for k, v in asdict(config).items() if k not in _EXECUTION_KEYS},
        "counts": {
            "ingested": join_report["records"],
            "suppressed": join_report["suppressed"],
            "observed": join_report["observed"],
        },
        "stages": digests,
    }
    (config.out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )
    report = {
        "counts": manifest["counts"],
        "reference_rate_per_100k": join_report.get("reference_rate_per_100k"),
        "model_ranking": [m["model"] for m in comparison["models"]],
        "quadrants": quadrant_counts["counts"],
        "moran": {"I": moran["I"], "p_sim": moran["p_sim"], "z_sim": moran["z_sim"]},
    }
    _write_json(config.out / "report.json", report, config)
    (config.out / "run_log.json").write_text(
        json.dumps(
            {"finished_at_unix": time.time(), "seed": config.seed, "version": __version__},
            indent=1,
        )
        + "\n"
    )
    return manifest


def run_stage(stage: str, config: RunConfig, **kwargs) -> dict:
    runners = {
        "ingest": cmd_ingest,
        "train": cmd_train,
        "explain": cmd_explain,
        "cluster": cmd_cluster,
        "spatial": cmd_spatial,
        "report": cmd_report,
    }
    if stage == "synth":
        return cmd_synth(config, **kwargs)
    return runners[stage](config)
