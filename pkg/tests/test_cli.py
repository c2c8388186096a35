"""Command-line pipeline: subcommands, config handling, exit codes."""

import json

import pytest

from urbanvitality.cli import load_config, main
from urbanvitality.errors import ConfigError


@pytest.fixture(scope="module")
def city_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_city") / "city"
    spec = out.parent / "spec.toml"
    spec.write_text(
        "grid_rows = 9\n"
        "grid_cols = 9\n"
        "district_k = 3\n"
        "station_count = 12\n"
        "noise_sd = 0.1\n"
        "[planted_betas]\n"
        "population_density = 0.4\n"
    )
    assert main(["synth", "--spec", str(spec), "--out", str(out),
                 "--seed", "6"]) == 0
    return out


def _run_pipeline(city_dir):
    config = str(city_dir / "pipeline.toml")
    assert main(["metrics", "--config", config]) == 0
    assert main(["activity", "--config", config]) == 0
    assert main(["regress", "--config", config, "--splits", "10",
                 "--cv-trace"]) == 0


def test_ingest_check(city_dir, capsys):
    assert main(["ingest-check", "--config", str(city_dir / "pipeline.toml")]) == 0
    out = capsys.readouterr().out
    assert "ingest-check: OK" in out
    assert "districts: 9" in out


def test_full_pipeline_outputs(city_dir):
    _run_pipeline(city_dir)
    out = city_dir / "out"
    for name in ("features.csv", "features_flags.csv", "activity_density.csv",
                 "model_report.json", "model_report.csv", "cv_trace.csv"):
        assert (out / name).exists(), name
    doc = json.loads((out / "model_report.json").read_text())
    assert set(doc) == {"land_use", "small_blocks", "aged_buildings",
                        "concentration", "vacuums", "combined"}


def test_report_prints_summary(city_dir, capsys):
    _run_pipeline(city_dir)
    assert main(["report", "--config", str(city_dir / "pipeline.toml")]) == 0
    out = capsys.readouterr().out
    assert "== combined ==" in out
    assert "adj R2=" in out


def test_metrics_rerun_is_byte_identical(city_dir):
    config = str(city_dir / "pipeline.toml")
    assert main(["metrics", "--config", config]) == 0
    first = (city_dir / "out" / "features.csv").read_bytes()
    assert main(["metrics", "--config", config]) == 0
    assert (city_dir / "out" / "features.csv").read_bytes() == first


def test_missing_config_exits_2(capsys, tmp_path):
    code = main(["metrics", "--config", str(tmp_path / "nope.toml")])
    assert code == 2
    assert "nope.toml" in capsys.readouterr().err


def test_missing_input_file_exits_2(capsys, tmp_path):
    config = tmp_path / "p.toml"
    config.write_text('[paths]\nblocks = "gone.geojson"\n')
    assert main(["metrics", "--config", str(config)]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_corrupt_layer_exits_2(capsys, city_dir, tmp_path):
    bad = tmp_path / "bad.geojson"
    bad.write_text('{"type": "FeatureCollection",\n  broken\n}')
    config = tmp_path / "p.toml"
    base = (city_dir / "pipeline.toml").read_text()
    config.write_text(base.replace(str(city_dir / "blocks.geojson"), str(bad)))
    assert main(["metrics", "--config", str(config)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_synth_spec_key_exits_2(capsys, tmp_path):
    spec = tmp_path / "s.toml"
    spec.write_text("gridsize = 4\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "c")]) == 2
    assert "unknown synth spec keys" in capsys.readouterr().err


def test_regress_before_metrics_exits_2(capsys, tmp_path):
    config = tmp_path / "p.toml"
    config.write_text(f'[output]\ndir = "{tmp_path / "out"}"\n')
    assert main(["regress", "--config", config.as_posix()]) == 2
    assert "metrics and activity stages" in capsys.readouterr().err


def test_load_config_defaults(tmp_path):
    path = tmp_path / "p.toml"
    path.write_text("")
    config = load_config(path)
    assert config.model.splits == 1000
    assert config.model.train_frac == 0.75
    assert config.net_exclusions == ("water", "natural_large_park")
    assert config.metric_config.reference_year == 2011
    assert config.city_filter is None


def test_load_config_overrides(tmp_path):
    path = tmp_path / "p.toml"
    path.write_text(
        "[calendar]\n"
        'holidays = ["2014-03-05"]\n'
        "[metrics]\n"
        "age_std_weighted = true\n"
        "small_park_max_area = 5e5\n"
        "[model]\n"
        "seed = 3\n"
        "splits = 77\n"
        'city_filter = ["d00_00"]\n'
        "[classification]\n"
        'Services = {third_place = true}\n'
    )
    config = load_config(path)
    assert len(config.holidays) == 1
    assert config.metric_config.age_std_weighted is True
    assert config.small_park_max_area == 5e5
    assert config.model.seed == 3
    assert config.model.splits == 77
    assert config.city_filter == ("d00_00",)
    assert config.classification["Services"]["third_place"] is True


def test_load_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/definitely/not/here.toml")
