"""Synthetic-city generator: determinism, validity, and ground truth."""

import datetime as dt
import math

import numpy as np
import pytest
from shapely.ops import unary_union

from urbanvitality import activity as activity_mod
from urbanvitality import model as model_mod
from urbanvitality.errors import ConfigError
from urbanvitality.metrics import METRIC_NAMES, compute_all_features
from urbanvitality.synth import SynthSpec, generate_city, synthesize_response


def _rel_err(a, b):
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def _load_layers(res):
    blocks = model_mod.load_blocks(res.paths["blocks"])
    patches = model_mod.load_landuse(res.paths["landuse"])
    vacuums = model_mod.load_vacuums(res.paths["vacuums"])
    vacuums = model_mod.apply_station_buffers(vacuums)
    places, companies = model_mod.load_places(res.paths["places"])
    streets = model_mod.load_streets(res.paths["streets"])
    census = model_mod.load_census_table(res.paths["census"])
    districts = model_mod.assemble_districts(blocks, census, vacuums)
    return districts, blocks, patches, places, companies, vacuums, streets


# --- spec validation --------------------------------------------------------

def test_spec_rejects_bad_district_size():
    with pytest.raises(ConfigError, match="divide"):
        SynthSpec(grid_rows=6, grid_cols=6, district_k=4).validate()


def test_spec_rejects_unknown_planted_metric():
    with pytest.raises(ConfigError, match="unknown metric"):
        SynthSpec(planted_betas={"walkability": 0.5}).validate()


def test_spec_rejects_tiny_grid():
    with pytest.raises(ConfigError, match="at least 3x3"):
        SynthSpec(grid_rows=2, grid_cols=6, district_k=1).validate()


# --- determinism ------------------------------------------------------------

def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(seed=5, grid_rows=6, grid_cols=6, district_k=3,
                     station_count=10,
                     planted_betas={"population_density": 0.3}, noise_sd=0.2)
    a = generate_city(spec, tmp_path / "a")
    b = generate_city(spec, tmp_path / "b")
    for key in a.paths:
        if key == "config":
            # the config embeds absolute output paths; normalize those
            ta = a.paths[key].read_text().replace(str(a.outdir), "@")
            tb = b.paths[key].read_text().replace(str(b.outdir), "@")
            assert ta == tb
        else:
            assert a.paths[key].read_bytes() == b.paths[key].read_bytes(), key


def test_seed_changes_output(tmp_path):
    kwargs = dict(grid_rows=6, grid_cols=6, district_k=3, station_count=10)
    a = generate_city(SynthSpec(seed=1, **kwargs), tmp_path / "a")
    b = generate_city(SynthSpec(seed=2, **kwargs), tmp_path / "b")
    assert a.paths["census"].read_bytes() != b.paths["census"].read_bytes()


# --- planted response -------------------------------------------------------

def test_synthesize_response_noiseless_closed_form():
    Z = np.array([[1.0, -1.0], [0.0, 0.5], [-1.0, 0.5]])
    betas = np.array([0.4, -0.2])
    out = synthesize_response(Z, betas, 0.0, seed=0, base_density=1e-4)
    assert np.allclose(out, 1e-4 * np.exp(Z @ betas), rtol=1e-15)


def test_synthesize_response_seeded_noise_reproducible():
    Z = np.zeros((5, 1))
    betas = np.array([0.0])
    a = synthesize_response(Z, betas, 0.3, seed=7, base_density=1e-4)
    b = synthesize_response(Z, betas, 0.3, seed=7, base_density=1e-4)
    c = synthesize_response(Z, betas, 0.3, seed=8, base_density=1e-4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# --- generated layers are ingestible and consistent -------------------------

def test_city_loads_through_ingestion(small_city):
    districts, blocks, patches, places, companies, vacuums, streets = \
        _load_layers(small_city)
    assert len(districts) == len(small_city.district_ids)
    assert [d.id for d in districts] == small_city.district_ids
    assert len(blocks) == 144
    assert all(d.net_area == pytest.approx(90000.0) for d in districts)
    assert companies  # the places layer carries the company features


def test_ground_truth_matches_computed_metrics(small_city):
    districts, blocks, patches, places, companies, vacuums, streets = \
        _load_layers(small_city)
    vectors = compute_all_features(districts, blocks, patches, places,
                                   companies, vacuums, streets)
    worst = 0.0
    for i, fv in enumerate(vectors):
        for name in METRIC_NAMES:
            truth = small_city.ground_truth[name][i]
            got = fv.get(name)
            if truth is None:
                assert got is None, (fv.district_id, name)
                continue
            assert got is not None, (fv.district_id, name)
            worst = max(worst, _rel_err(got, truth))
    assert worst < 1e-9


def test_parallel_metrics_match_serial(small_city):
    districts, blocks, patches, places, companies, vacuums, streets = \
        _load_layers(small_city)
    serial = compute_all_features(districts, blocks, patches, places,
                                  companies, vacuums, streets, jobs=1)
    parallel = compute_all_features(districts, blocks, patches, places,
                                    companies, vacuums, streets, jobs=4)
    for a, b in zip(serial, parallel):
        assert a.district_id == b.district_id
        assert a.values == b.values


def test_activity_trace_inverts_to_planted_densities(small_city):
    districts, blocks, _, _, _, vacuums, _ = _load_layers(small_city)
    stations, alias = activity_mod.load_stations(small_city.paths["stations"])
    records = activity_mod.load_activity_csv(small_city.paths["activity"], alias)
    boundary = unary_union([d.polygon for d in districts])
    cells = activity_mod.build_cell_coverage(stations, boundary, vacuums)
    rows = activity_mod.compute_activity_densities(districts, cells, records)
    got = {r.district_id: r.activity_density for r in rows}
    for did, truth in zip(small_city.district_ids, small_city.activity_density):
        assert _rel_err(got[did], truth) < 1e-6


def test_weekend_hours_are_scaled_not_used(small_city):
    records = activity_mod.load_activity_csv(small_city.paths["activity"])
    hours = records.sorted_hours()
    assert len(hours) == 7 * 24  # the default spec spans one full week
    weekend = [h for h in hours if h.weekday() >= 5]
    assert len(weekend) == 48


def test_ground_truth_csv_matches_result(small_city):
    text = small_city.paths["ground_truth"].read_text().splitlines()
    header = text[0].split(",")
    assert header[0] == "district_id"
    assert header[1:26] == list(METRIC_NAMES)
    assert header[26:] == ["activity_density", "net_area"]
    first = text[1].split(",")
    assert first[0] == small_city.district_ids[0]
    assert float(first[26]) == small_city.activity_density[0]


def test_intersection_counts_have_planted_variation(small_city):
    vals = small_city.ground_truth["intersection_density"]
    assert len(set(vals)) > 1  # alleys vary the count per district
    base = 4  # (k-1)^2 interior grid crossings for k=3
    net = 90000.0
    for v in vals:
        extra = v * net - base
        assert extra == pytest.approx(round(extra), abs=1e-9)
        assert 0 <= round(extra) <= 6
