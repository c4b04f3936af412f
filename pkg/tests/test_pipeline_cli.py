import json
import subprocess
import sys

import numpy as np
import pytest

from countyrisk.cli import main
from countyrisk.pipeline import RunConfig, build_config, cmd_ingest, parse_config_file
from countyrisk.errors import InputError


def run_cli(*args):
    return main([str(a) for a in args])


def synth_inputs(out_dir, n=80, seed=5, scenario="threshold"):
    assert run_cli("synth", "--out", out_dir, "--seed", seed, "--n", n, "--scenario", scenario) == 0
    return {
        "--mortality": out_dir / "mortality.csv",
        "--svi": out_dir / "svi.csv",
        "--places": out_dir / "places.csv",
        "--ahrf": out_dir / "ahrf.csv",
        "--adjacency": out_dir / "adjacency.csv",
        "--centroids": out_dir / "centroids.csv",
    }


def flags(mapping):
    out = []
    for key, value in mapping.items():
        out.extend([key, value])
    return out


def run_all_stages(out_dir, inputs, seed=5, threads=1, extra=()):
    common = ["--out", out_dir, "--seed", seed, "--threads", threads, *flags(inputs), *extra]
    for stage in ("ingest", "train", "explain", "cluster", "spatial", "report"):
        assert run_cli(stage, *common) == 0, stage


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """One full pipeline run shared by the inspection tests."""
    out = tmp_path_factory.mktemp("run")
    inputs = synth_inputs(out, n=80, seed=5)
    run_all_stages(
        out, inputs, extra=["--permutations", 199, "--folds", 4],
    )
    return out


class TestStages:
    def test_outputs_exist(self, small_run):
        for name in (
            "counties.csv", "suppressed.csv", "reference_rate.json", "join_report.json",
            "suppressed_profile.csv", "comparison.csv", "model_gbt.json", "best_model.json",
            "importance.json", "beeswarm.csv", "cluster_profile.csv", "quadrants.csv",
            "silent_risk.csv", "desert_contrast.json", "moran_global.json", "lisa.csv",
            "lisa_map.geojson", "manifest.json", "report.json",
        ):
            assert (small_run / name).exists(), name

    def test_join_report_counts(self, small_run):
        report = json.loads((small_run / "join_report.json").read_text())
        assert report["records"] == 80
        assert report["observed"] + report["suppressed"] == 80

    def test_outputs_embed_seed_and_version(self, small_run):
        first_line = (small_run / "counties.csv").read_text().splitlines()[0]
        assert first_line.startswith("#") and "seed=5" in first_line and "version=" in first_line
        meta = json.loads((small_run / "moran_global.json").read_text())["_meta"]
        assert meta["seed"] == 5 and meta["version"]

    def test_dependence_exports_for_top4(self, small_run):
        importance = json.loads((small_run / "importance.json").read_text())
        top4 = [row["feature"] for row in importance["ranking"][:4]]
        for name in top4:
            assert (small_run / f"dependence_{name}.csv").exists()

    def test_quadrant_counts_sum(self, small_run):
        counts = json.loads((small_run / "quadrant_counts.json").read_text())["counts"]
        observed = json.loads((small_run / "join_report.json").read_text())["observed"]
        assert sum(counts.values()) == observed

    def test_comparison_sorted_by_r2(self, small_run):
        rows = json.loads((small_run / "comparison.json").read_text())["models"]
        r2s = [row["r2"] for row in rows]
        assert r2s == sorted(r2s, reverse=True)


class TestPlantedSplit:
    def test_hand_built_fixture_counts(self, tmp_path):
        # 20 counties, exactly 5 suppressed
        rows = ["fips,county_name,deaths,population"]
        svi = ["fips,poverty_rate,unemployment_rate,housing_burden,no_hs_diploma,"
               "uninsured_rate,svi_percentile,age_65_plus,disability_rate,"
               "single_parent_hh,minority_pop,mobile_homes,no_vehicle_access"]
        places = ["fips,depression_prev,current_smoking,obesity_rate,poor_mental_health,"
                  "poor_sleep,physical_inactivity,binge_drinking,diabetes_prev,high_blood_pressure"]
        ahrf = ["fips,psychiatrists_per_100k,primary_care_per_100k,rural"]
        for i in range(20):
            fips = f"{20001 + i:05d}"
            deaths = "Suppressed" if i < 5 else str(12 + i)
            rows.append(f"{fips},County {i},{deaths},{50000 + 1000 * i}")
            svi.append(f"{fips}," + ",".join(str(5 + (i + j) % 7) for j in range(12)))
            places.append(f"{fips}," + ",".join(str(10 + (i * j) % 9) for j in range(9)))
            ahrf.append(f"{fips},{i % 4},{40 + i},{i % 2}")
        (tmp_path / "mortality.csv").write_text("\n".join(rows) + "\n")
        (tmp_path / "svi.csv").write_text("\n".join(svi) + "\n")
        (tmp_path / "places.csv").write_text("\n".join(places) + "\n")
        (tmp_path / "ahrf.csv").write_text("\n".join(ahrf) + "\n")
        config = RunConfig(
            mortality=str(tmp_path / "mortality.csv"),
            svi=str(tmp_path / "svi.csv"),
            places=str(tmp_path / "places.csv"),
            ahrf=str(tmp_path / "ahrf.csv"),
            out_dir=str(tmp_path / "out"),
            seed=0,
        )
        result = cmd_ingest(config)
        assert result["observed_count"] == 15
        assert result["suppressed_count"] == 5


class TestExitCodes:
    def test_missing_ahrf_file_names_it(self, tmp_path, capsys):
        inputs = synth_inputs(tmp_path, n=40, seed=1)
        missing = tmp_path / "nonexistent_ahrf.csv"
        inputs["--ahrf"] = missing
        code = run_cli("ingest", "--out", tmp_path, "--seed", 1, *flags(inputs))
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_report_before_stages_is_exit_4(self, tmp_path):
        assert run_cli("report", "--out", tmp_path / "empty", "--seed", 0) == 4

    def test_schema_error_is_exit_2(self, tmp_path):
        inputs = synth_inputs(tmp_path, n=40, seed=1)
        bad = tmp_path / "bad.csv"
        bad.write_text("wrong,header\n1,2\n")
        inputs["--mortality"] = bad
        assert run_cli("ingest", "--out", tmp_path, "--seed", 1, *flags(inputs)) == 2

    def test_console_script_entry(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "countyrisk.cli", "synth", "--out", str(tmp_path / "s"),
             "--seed", "3", "--n", "25", "--scenario", "null"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0 and "synth: ok" in proc.stdout


class TestConfigFile:
    def test_parse_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "# analysis configuration\n"
            "seed = 11\n"
            "folds = 4\n"
            "permutations = 499\n"
            "learning_rate = 0.1\n"
        )
        values = parse_config_file(cfg_file)
        assert values["seed"] == "11"
        config = build_config(cfg_file, {"seed": 99, "out_dir": "somewhere"})
        assert config.seed == 99  # flag beats file
        assert config.folds == 4
        assert config.learning_rate == 0.1
        assert config.out_dir == "somewhere"

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("not_a_key = 5\n")
        with pytest.raises(InputError):
            build_config(cfg_file, {})

    def test_malformed_line_rejected(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("just some words\n")
        with pytest.raises(InputError, match="line 1"):
            build_config(cfg_file, {})


class TestDeterminismAndIsolation:
    def test_rerun_reproduces_stage_outputs(self, tmp_path):
        inputs = synth_inputs(tmp_path / "in", n=60, seed=8, scenario="clustered")
        out = tmp_path / "out"
        common = ["--out", out, "--seed", 8, *flags(inputs), "--permutations", 199, "--folds", 3]
        for stage in ("ingest", "cluster", "spatial"):
            assert run_cli(stage, *common) == 0
        lisa_before = (out / "lisa.csv").read_bytes()
        moran_before = (out / "moran_global.json").read_bytes()
        (out / "lisa.csv").unlink()
        (out / "moran_global.json").unlink()
        assert run_cli("spatial", *common) == 0
        assert (out / "lisa.csv").read_bytes() == lisa_before
        assert (out / "moran_global.json").read_bytes() == moran_before

    def test_counties_csv_identical_across_runs(self, tmp_path):
        inputs = synth_inputs(tmp_path / "in", n=60, seed=8, scenario="null")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert run_cli("ingest", "--out", out, "--seed", 8, *flags(inputs)) == 0
        assert (out_a / "counties.csv").read_bytes() == (out_b / "counties.csv").read_bytes()
